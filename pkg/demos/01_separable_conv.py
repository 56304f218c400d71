# Depthwise separable convolution, step by step.
# Run: python3 demos/01_separable_conv.py

# %%
import numpy as np

from edgexc import tensor as T
from edgexc.layers import SeparableConvSpec, separable_conv

rng = np.random.default_rng(0)
x = rng.normal(size=(2, 8, 16, 16))  # batch, channels, height, width
x.shape

# %% a regular 3x3 conv mixes space and channels in one go
w_full = rng.normal(size=(16, 8, 3, 3))
y_full = T.conv2d(x, w_full, g=T.ConvGeometry.square(3, 1, 1))
print("regular conv", y_full.shape, "weights:", w_full.size)

# %% the separable version filters each channel on its own, then mixes with 1x1
spec = SeparableConvSpec(8, 16)
dw = rng.normal(size=spec.depthwise_shape)  # (8, 1, 3, 3)
pw = rng.normal(size=spec.pointwise_shape)  # (16, 8, 1, 1)
y_sep = separable_conv(x, spec, dw, pw)
print("separable conv", y_sep.shape, "weights:", spec.num_params())

# %% same thing written as two explicit stages
mid = T.depthwise_conv2d(x, dw, T.ConvGeometry.square(3, 1, 1))
print("depthwise output", mid.shape)  # channels unchanged
y_two = T.conv2d(mid, pw)
print("max abs difference:", np.abs(y_two - y_sep).max())

# %% stride 2 halves the spatial size in the depthwise stage
down = separable_conv(x, SeparableConvSpec(8, 16, stride=2), dw, pw)
print("stride 2:", down.shape)

# %% the saving grows with width: 9*C + C*C' instead of 9*C*C'
for c in (64, 256, 728):
    print(f"C={c:4d}  regular {9 * c * c:>9,}  separable {SeparableConvSpec(c, c).num_params():>9,}")
