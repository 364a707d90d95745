"""Print how compound scaling grows toy-B0: stages, parameters and MACs per phi."""

from scalecam.scaling import ScalingCoefficients, compound_scale, constraint_value, count_params_flops, toy_b0

base = toy_b0(3)
print(f"alpha*beta^2*gamma^2 = {constraint_value(ScalingCoefficients()):.6g}")
print(f"{'phi':>4} {'res':>4} {'repeats':>10} {'channels':>14} {'params':>8} {'MACs':>10}")
prev = None
for phi in (0, 1, 2, 3):
    plan = compound_scale(base, ScalingCoefficients(phi=phi))
    params, macs = count_params_flops(plan)
    repeats = ",".join(str(s.repeats) for s in plan.stages)
    channels = ",".join(str(s.channels) for s in plan.stages)
    growth = "" if prev is None else f"  x{macs / prev:.2f}"
    print(f"{phi:>4} {plan.resolution:>4} {repeats:>10} {channels:>14} {params:>8} {macs:>10}{growth}")
    prev = macs
