"""Grad-CAM on a network whose answer is known in closed form.

The network is a 1x1 identity convolution, a global mean pool and a dense
layer whose class-0 logit is that mean. Every gradient entry is then 1/Z and
the importance weight is exactly 1/Z, where Z is the number of pixels.
"""

import numpy as np

from scalecam.explain import gradcam, mask_stats
from scalecam.layers import Conv2D, Dense, GlobalAvgPool, Input, Network, Softmax
from scalecam.tensor import Tensor

size = 4
conv = Conv2D("conv", 1, 1, 1)
conv.params["weights"] = Tensor(np.ones((1, 1, 1, 1)))
dense = Dense("logits", 1, 2)
dense.params["weights"] = Tensor(np.array([[1.0, 0.0]]))
net = Network([Input("input"), conv, GlobalAvgPool("pool"), dense, Softmax("predictions")], 2, resolution=size)

image = np.zeros((1, size, size))
image[0, 1:3, 1:3] = 1.0
image[0, 0, 0] = 3.0
heat = gradcam(net, image, target_class=0, layer="conv")
print("importance weights:", heat.weights, " expected 1/Z =", 1 / size**2)
print("raw map (ReLU(A/Z)):")
print(heat.raw)
stats = mask_stats(heat.raw)
print(f"mask threshold mu+sigma = {stats.threshold:.6f}, mask mean = {stats.mask_mean:.6f}")
