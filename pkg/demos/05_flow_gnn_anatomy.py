"""Why the flow-weighted graph layer is the right shape for this problem.

With identity weights and no activation, one layer IS the hourly transport
step: features move exactly like people. The demo checks that equivalence
numerically, then peeks at the autodiff tape underneath.
"""

import numpy as np

from epiquota.nn import Tensor
from epiquota.nn.layers import FlowGNNLayer
from epiquota.sihr import EpidemicState, mobility_substep

rng = np.random.default_rng(0)

k = 5
state = EpidemicState(rng.uniform(50, 150, k), rng.uniform(0, 10, k),
                      np.zeros(k), rng.uniform(0, 20, k))
flows = rng.uniform(0, 20, (k, k))
np.fill_diagonal(flows, 0.0)
flows *= np.minimum(1.0, 0.9 * state.movable
                    / np.maximum(flows.sum(axis=1), 1e-12))[:, None]

layer = FlowGNNLayer(rng, 3, 3, activation="linear")
layer.w.data = np.vstack([np.eye(3), np.eye(3)])   # out = inflow + stay
layer.b.data = np.zeros(3)

features = np.stack([state.s, state.i, state.r], axis=1)
out = layer(Tensor(features), flows, state.movable)

stay, arrived, _ = mobility_substep(state, flows)
moved = stay.add(arrived)
expected = np.stack([moved.s, moved.i, moved.r], axis=1)

print("feature transport vs population transport, max gap:",
      f"{np.max(np.abs(out.data - expected)):.2e}")

# The same layer is differentiable in the flows: ask the tape how sending
# one more person from region 0 to region 1 changes total infected there.
ft = Tensor(features)
mt = Tensor(flows.copy(), requires_grad=True)
out = layer(ft, mt, state.movable)
out.backward(seed=np.eye(3)[1] * np.eye(k)[1][:, None])   # d I_1 / d flows
grad = mt.grad[0, 1]
carried = features[0, 1] / state.movable[0]
print(f"dI(region 1)/dflow(0 -> 1): tape {grad:.6f}, "
      f"hand I_0/N_0 = {carried:.6f}")
print("\nstacked with trained weights, the layer reads each region's")
print("neighborhood the same way the epidemic does: through who actually")
print("travels, not just who is adjacent.")
