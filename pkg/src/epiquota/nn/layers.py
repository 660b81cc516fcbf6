"""Graph layers whose aggregation mirrors population transport, ablation
variants, dense layers, and the actor/critic networks built from them.

All layers accept leading batch dimensions: features (B, K, F), edge inputs
(B, K, K), movable population (B, K) or unbatched equivalents.
"""

from __future__ import annotations

import numpy as np

from .tape import _ACT, Tensor, linear

NUM_NODE_FEATURES = 7  # visible state (3), its hourly change (3), history L (1)


def glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


class Dense:
    def __init__(self, rng, fan_in, fan_out, activation="relu", name="dense"):
        self.w = Tensor(glorot(rng, fan_in, fan_out), requires_grad=True,
                        name=f"{name}.w")
        self.b = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.b")
        self.activation = activation

    def __call__(self, x):
        return linear([x], self.w, self.b, self.activation)

    def params(self):
        return [self.w, self.b]


class _GraphLayer:
    """Shared affine-over-concatenation plumbing of the graph layers."""

    def __init__(self, rng, fan_in, fan_out, activation="relu", name="gnn"):
        self.w = Tensor(glorot(rng, 2 * fan_in, fan_out), requires_grad=True,
                        name=f"{name}.w")
        self.b = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.b")
        self.activation = activation

    def params(self):
        return [self.w, self.b]

    def _combine(self, first, second):
        return linear([first, second], self.w, self.b, self.activation)


class FlowGNNLayer(_GraphLayer):
    """Aggregation equals the mobility sub-step applied to features: a stay
    term scaled by the retained fraction plus flow-weighted inflows.

    Training spends nearly all its time in this layer, so the whole call
    (aggregate, affine, activation) is one taped node with a hand-written
    backward; the finite-difference tests pin it down."""

    def __call__(self, f, m, n_mov):
        f, m = _as_tensor(f), _as_tensor(m)
        act, act_vjp = _ACT[self.activation]
        w, b = self.w, self.b
        fd, md = f.data, m.data
        inv_n = np.where(n_mov > 0, 1.0 / np.where(n_mov > 0, n_mov, 1.0), 0.0)
        # Infeasible rows get the transport treatment: an overdrawn row is
        # rescaled to empty its region and an empty region sends nothing.
        # Without the rescale a nearly drained region turns 1/n into a huge
        # aggregation weight and the activations blow up.
        out_row = md.sum(axis=-1)
        frac = out_row * inv_n
        clip = frac > 1.0
        scale = np.where(clip, 1.0 / np.maximum(frac, 1.0), 1.0)
        scale = np.where(n_mov > 0, scale, 0.0)
        me = md * scale[..., None]
        fn = fd * inv_n[..., None]
        stay = 1.0 - np.minimum(frac, 1.0)
        f_in = np.swapaxes(me, -1, -2) @ fn
        cat = np.concatenate([f_in, fd * stay[..., None]], axis=-1)
        # One flat GEMM instead of numpy's per-batch matmul loop.
        fan_in, fan_out = w.data.shape
        flat_cat = cat.reshape(-1, fan_in)
        value = act((flat_cat @ w.data + b.data).reshape(*cat.shape[:-1],
                                                         fan_out))
        parents = (f, m, w, b)
        out = Tensor(value, requires_grad=any(p.requires_grad for p in parents),
                     _parents=parents, _op="flow_gnn")
        width = fd.shape[-1]

        def backward(grad):
            if act_vjp is not None:
                grad = grad * act_vjp(value)
            flat = grad.reshape(-1, fan_out)
            if w.requires_grad or b.requires_grad:
                w._accumulate(flat_cat.T @ flat)
                b._accumulate(flat.sum(axis=0))
            if f.requires_grad or m.requires_grad:
                gcat = (flat @ w.data.T).reshape(cat.shape)
                g_in = gcat[..., :width]
                g_stay = gcat[..., width:]
                if f.requires_grad:
                    f._accumulate(g_stay * stay[..., None]
                                  + (me @ g_in) * inv_n[..., None])
                if m.requires_grad:
                    g_frac = (g_stay * fd).sum(axis=-1) * (stay > 0) * inv_n
                    g_me = (fn @ np.swapaxes(g_in, -1, -2)
                            - g_frac[..., None])
                    g_md = g_me * scale[..., None]
                    if clip.any():
                        # a rescaled row keeps its sum pinned at n, so
                        # raising one entry shrinks the rest of the row
                        inv_out = np.where(clip, 1.0 / np.where(clip, out_row,
                                                                1.0), 0.0)
                        g_md = g_md - ((g_me * md).sum(axis=-1)
                                       * scale * inv_out)[..., None]
                    m._accumulate(g_md)
        out._backward = backward
        return out


class GNNMeanLayer(_GraphLayer):
    """Unweighted mean over in-neighbors (edges with positive flow),
    concatenated with the node's own feature. Isolated nodes aggregate zero."""

    def __call__(self, f, m, n_mov):
        m = _as_tensor(m)
        mask = (m.data > 0).astype(np.float64)
        deg = mask.sum(axis=-2)
        norm = np.swapaxes(mask, -1, -2) / np.maximum(deg, 1.0)[..., None]
        f_agg = Tensor(norm) @ f
        return self._combine(f, f_agg)


class GNNSoftmaxLayer(_GraphLayer):
    """In-edge aggregation weighted by a softmax over flow volumes; the
    weights are differentiable in the flows."""

    def __call__(self, f, m, n_mov):
        m = _as_tensor(m)
        mask = m.data > 0
        # Stabilize with the per-destination max (a constant shift).
        shift = np.max(np.where(mask, m.data, -np.inf), axis=-2, keepdims=True)
        shift = np.where(np.isfinite(shift), shift, 0.0)
        e = (m - Tensor(shift)).exp() * Tensor(mask.astype(np.float64))
        denom = e.sum(axis=-2, keepdims=True)
        isolated = (mask.sum(axis=-2, keepdims=True) == 0).astype(np.float64)
        weights = e / (denom + Tensor(isolated))
        f_agg = weights.transpose() @ f
        return self._combine(f, f_agg)


GRAPH_LAYERS = {
    "flow": FlowGNNLayer,
    "mean": GNNMeanLayer,
    "softmax": GNNSoftmaxLayer,
}


class _Network:
    def parameters(self):
        return [p for part in self._parts() for p in part.params()]

    def state_dict(self):
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name}")
            out[p.name] = p.data.tolist()
        return out

    def load_state_dict(self, state):
        params = {p.name: p for p in self.parameters()}
        if set(state) != set(params):
            missing = set(params) - set(state)
            extra = set(state) - set(params)
            raise ValueError(f"state mismatch: missing {sorted(missing)}, "
                             f"unexpected {sorted(extra)}")
        for name, values in state.items():
            data = np.asarray(values, dtype=np.float64)
            if data.shape != params[name].data.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{data.shape} vs {params[name].data.shape}")
            params[name].data = data

    def copy_from(self, other):
        for mine, theirs in zip(self.parameters(), other.parameters()):
            mine.data = theirs.data.copy()

    def soft_update_from(self, other, tau):
        for mine, theirs in zip(self.parameters(), other.parameters()):
            mine.data = (1.0 - tau) * mine.data + tau * theirs.data

    def perturb_from(self, other, rng, std):
        for mine, theirs in zip(self.parameters(), other.parameters()):
            mine.data = theirs.data + rng.normal(0.0, std, theirs.data.shape)


class ActorNetwork(_Network):
    """Stacked graph layers over the demand window, then a pairwise edge head
    squashing each (origin embedding, destination embedding, demand) triple
    into a quota rate in [0, 1]."""

    def __init__(self, rng, num_features=NUM_NODE_FEATURES, width=32, depth=4,
                 layer_kind="flow", demand_scale=1.0):
        layer_cls = GRAPH_LAYERS[layer_kind]
        self.layer_kind = layer_kind
        self.demand_scale = float(demand_scale)
        self.gnn = [layer_cls(rng, num_features if k == 0 else width, width,
                              "relu", name=f"gnn{k}") for k in range(depth)]
        self.u = Tensor(glorot(rng, width, 1), requires_grad=True, name="edge.u")
        self.v = Tensor(glorot(rng, width, 1), requires_grad=True, name="edge.v")
        self.w_d = Tensor(np.zeros((1, 1)), requires_grad=True, name="edge.w_d")
        self.b = Tensor(np.zeros(1), requires_grad=True, name="edge.b")

    def parameters(self):
        gnn = [p for layer in self.gnn for p in layer.params()]
        return gnn + [self.u, self.v, self.w_d, self.b]

    def logits(self, f0, edge_inputs, n_mov):
        """Pre-squash edge scores; exposed so training can keep them from
        saturating (a pinned sigmoid passes no gradient)."""
        if len(edge_inputs) != len(self.gnn):
            raise ValueError(f"need {len(self.gnn)} edge inputs, "
                             f"got {len(edge_inputs)}")
        f = _as_tensor(f0)
        for layer, m in zip(self.gnn, edge_inputs):
            f = layer(f, m, n_mov)
        origin = f @ self.u                          # (..., K, 1)
        dest = (f @ self.v).transpose()              # (..., 1, K)
        demand = _as_tensor(edge_inputs[0]) * (1.0 / self.demand_scale)
        return origin + dest + demand * self.w_d + self.b

    def forward(self, f0, edge_inputs, n_mov):
        """edge_inputs: one (.., K, K) matrix per layer, hours tau..tau+P-1."""
        return self.logits(f0, edge_inputs, n_mov).sigmoid()

    def act(self, f0, edge_inputs, n_mov):
        """Forward pass returning a plain array (no backward intended)."""
        return self.forward(f0, edge_inputs, n_mov).data


class CriticNetwork(_Network):
    """Graph layers whose edge input is the controlled flow, then a per-node
    dense head averaged into one scalar score."""

    def __init__(self, rng, num_features=NUM_NODE_FEATURES, width=32, depth=4,
                 layer_kind="flow"):
        layer_cls = GRAPH_LAYERS[layer_kind]
        self.layer_kind = layer_kind
        self.gnn = [layer_cls(rng, num_features if k == 0 else width, width,
                              "relu", name=f"gnn{k}") for k in range(depth)]
        self.head1 = Dense(rng, width, width, "relu", name="head1")
        self.head2 = Dense(rng, width, 1, "linear", name="head2")

    def _parts(self):
        return [*self.gnn, self.head1, self.head2]

    def forward(self, f0, edge_inputs, n_mov):
        if len(edge_inputs) != len(self.gnn):
            raise ValueError(f"need {len(self.gnn)} edge inputs, "
                             f"got {len(edge_inputs)}")
        f = _as_tensor(f0)
        for layer, m in zip(self.gnn, edge_inputs):
            f = layer(f, m, n_mov)
        scores = self.head2(self.head1(f))           # (..., K, 1)
        return scores.mean(axis=(-2, -1))
