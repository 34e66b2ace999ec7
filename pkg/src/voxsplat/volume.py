"""Sparse voxel feature volume: quantization, U-Net encoder, trilinear query.

The convolution keeps sparse-tensor semantics: stride-1 layers are
submanifold (output sites = input sites), stride-2 layers emit every coarse
site reachable through the kernel, and transposed layers generate the fine
sites reachable from occupied coarse ones.  Neighbor maps are built once per
key set and drive gather/GEMM/scatter in both directions, so forward and
backward are deterministic.
"""

from dataclasses import dataclass
from itertools import product

import numpy as np

from . import kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

OFFSETS = np.array(list(product((-1, 0, 1), repeat=3)), dtype=np.int64)  # (27, 3)


class VolumeError(Exception):
    pass


def grid_dims(box, voxel_size):
    """Voxel counts per axis, rounded up to multiples of 8 (three stride-2 levels)."""
    box = np.asarray(box, dtype=np.float64).reshape(2, 3)
    extent = box[1] - box[0]
    n = extent / voxel_size
    snapped = np.where(np.abs(n - np.round(n)) < 1e-6, np.round(n), np.ceil(n))
    dims = (np.ceil(snapped / 8).astype(np.int64) * 8)
    return dims


def _decompose(keys, dims):
    k2 = keys % dims[2]
    rest = keys // dims[2]
    k1 = rest % dims[1]
    k0 = rest // dims[1]
    return np.stack([k0, k1, k2], axis=1)


def _compose(ijk, dims):
    return (ijk[:, 0] * dims[1] + ijk[:, 1]) * dims[2] + ijk[:, 2]


@dataclass
class SparseVoxelTensor:
    keys: np.ndarray      # (M,) sorted linear voxel keys
    features: np.ndarray  # (M, C)
    dims: np.ndarray      # (3,)
    origin: np.ndarray    # (3,) world position of the grid corner
    voxel_size: float


@dataclass
class FeatureVolume:
    keys: np.ndarray
    features: np.ndarray
    dims: np.ndarray
    origin: np.ndarray
    voxel_size: float

    def grid_coords(self, points):
        """World points to corner-lattice coordinates (centers at integers)."""
        return (np.atleast_2d(points) - self.origin) / self.voxel_size - 0.5

    def query(self, points):
        """Trilinear feature interpolation; unoccupied corners contribute zero."""
        return kernels.trilinear_gather(self.keys, self.features, self.dims,
                                        self.grid_coords(points))

    def query_adjoint(self, points, grads):
        return kernels.trilinear_scatter(self.keys, self.features.shape[0],
                                         self.dims, self.grid_coords(points),
                                         np.ascontiguousarray(grads))


def quantize(cloud, box, voxel_size):
    """Average point colors into occupied voxels of the foreground grid."""
    box = np.asarray(box, dtype=np.float64).reshape(2, 3)
    dims = grid_dims(box, voxel_size)
    inside = np.all((cloud.positions >= box[0]) & (cloud.positions <= box[1]), axis=1)
    if not np.any(inside):
        raise VolumeError("no points intersect the foreground box")
    pts = cloud.positions[inside]
    cols = cloud.colors[inside]
    ijk = np.minimum(((pts - box[0]) / voxel_size).astype(np.int64), dims - 1)
    lin = _compose(ijk, dims)
    order = np.argsort(lin, kind="stable")
    lin_sorted = lin[order]
    uniq, starts = np.unique(lin_sorted, return_index=True)
    counts = np.diff(np.append(starts, lin.size))
    feats = np.add.reduceat(cols[order], starts) / counts[:, None]
    return SparseVoxelTensor(uniq, feats, dims, box[0].copy(), float(voxel_size))


# --- neighbor maps ----------------------------------------------------------

def _submanifold_maps(keys, dims):
    ijk = _decompose(keys, dims)
    maps = []
    for d in OFFSETS:
        nbr = ijk + d
        ok = np.all((nbr >= 0) & (nbr < dims), axis=1)
        nbr_lin = _compose(nbr[ok], dims)
        idx = np.searchsorted(keys, nbr_lin)
        idx = np.clip(idx, 0, keys.size - 1)
        found = keys[idx] == nbr_lin
        out_idx = np.flatnonzero(ok)[found]
        maps.append((out_idx, idx[found]))
    return keys, maps


def _downsample_maps(keys, dims):
    out_dims = dims // 2
    ijk = _decompose(keys, dims)
    cand_out, cand_in, cand_off = [], [], []
    for oi, d in enumerate(OFFSETS):
        shifted = ijk - d
        ok = np.all(shifted % 2 == 0, axis=1)
        o = shifted[ok] // 2
        ok2 = np.all((o >= 0) & (o < out_dims), axis=1)
        cand_out.append(_compose(o[ok2], out_dims))
        cand_in.append(np.flatnonzero(ok)[ok2])
        cand_off.append(np.full(ok2.sum(), oi, dtype=np.int64))
    all_out = np.concatenate(cand_out)
    out_keys = np.unique(all_out)
    maps = []
    flat_idx = np.searchsorted(out_keys, all_out)
    offs = np.concatenate(cand_off)
    ins = np.concatenate(cand_in)
    for oi in range(len(OFFSETS)):
        sel = offs == oi
        maps.append((flat_idx[sel], ins[sel]))
    return out_keys, maps


def _upsample_maps(keys, dims):
    out_dims = dims * 2
    ijk = _decompose(keys, dims)
    cand_out, cand_in, cand_off = [], [], []
    for oi, d in enumerate(OFFSETS):
        fine = ijk * 2 + d
        ok = np.all((fine >= 0) & (fine < out_dims), axis=1)
        cand_out.append(_compose(fine[ok], out_dims))
        cand_in.append(np.flatnonzero(ok))
        cand_off.append(np.full(int(ok.sum()), oi, dtype=np.int64))
    all_out = np.concatenate(cand_out)
    out_keys = np.unique(all_out)
    maps = []
    flat_idx = np.searchsorted(out_keys, all_out)
    offs = np.concatenate(cand_off)
    ins = np.concatenate(cand_in)
    for oi in range(len(OFFSETS)):
        sel = offs == oi
        maps.append((flat_idx[sel], ins[sel]))
    return out_keys, maps


# --- layers -----------------------------------------------------------------

class ConvLayer:
    """3x3x3 sparse convolution followed by batch norm and ReLU."""

    def __init__(self, c_in, c_out, stride, transposed, rng):
        fan_in = 27 * c_in
        self.weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(27, c_in, c_out))
        self.bias = np.zeros(c_out)
        self.gamma = np.ones(c_out)
        self.beta = np.zeros(c_out)
        self.running_mean = np.zeros(c_out)
        self.running_var = np.ones(c_out)
        self.stride = stride
        self.transposed = transposed

    def out_keys_and_maps(self, keys, dims):
        if self.transposed:
            return _upsample_maps(keys, dims), dims * 2
        if self.stride == 2:
            return _downsample_maps(keys, dims), dims // 2
        return _submanifold_maps(keys, dims), dims

    def forward(self, feats, maps, out_keys, train):
        z = np.broadcast_to(self.bias, (out_keys.size, self.bias.size)).copy()
        for oi, (out_idx, in_idx) in enumerate(maps):
            if out_idx.size:
                z[out_idx] += feats[in_idx] @ self.weight[oi]
        if train:
            mean = z.mean(axis=0)
            var = z.var(axis=0)
            self.running_mean = (1 - BN_MOMENTUM) * self.running_mean + BN_MOMENTUM * mean
            self.running_var = (1 - BN_MOMENTUM) * self.running_var + BN_MOMENTUM * var
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        zhat = (z - mean) * inv_std
        y = self.gamma * zhat + self.beta
        out = np.maximum(y, 0.0)
        ctx = {"zhat": zhat, "inv_std": inv_std, "mask": y > 0, "train": train}
        return out, ctx

    def backward(self, d_out, ctx, feats, maps, n_in, grads, prefix):
        dy = d_out * ctx["mask"]
        zhat = ctx["zhat"]
        grads[prefix + ".gamma"] += (dy * zhat).sum(axis=0)
        grads[prefix + ".beta"] += dy.sum(axis=0)
        dzhat = dy * self.gamma
        if ctx["train"]:
            m = zhat.shape[0]
            dz = ctx["inv_std"] * (dzhat - dzhat.mean(axis=0)
                                   - zhat * (dzhat * zhat).sum(axis=0) / m)
        else:
            dz = dzhat * ctx["inv_std"]
        grads[prefix + ".bias"] += dz.sum(axis=0)
        d_in = np.zeros((n_in, self.weight.shape[1]))
        for oi, (out_idx, in_idx) in enumerate(maps):
            if out_idx.size:
                grads[prefix + ".weight"][oi] += feats[in_idx].T @ dz[out_idx]
                d_in[in_idx] += dz[out_idx] @ self.weight[oi].T
        return d_in

    def param_items(self, prefix):
        return [(prefix + ".weight", self.weight), (prefix + ".bias", self.bias),
                (prefix + ".gamma", self.gamma), (prefix + ".beta", self.beta)]

    def state_items(self, prefix):
        return [(prefix + ".running_mean", self.running_mean),
                (prefix + ".running_var", self.running_var)]


class MixLayer:
    """1x1x1 linear mix applied after each skip concatenation."""

    def __init__(self, c_in, c_out, rng):
        self.weight = rng.normal(0.0, np.sqrt(2.0 / c_in), size=(c_in, c_out))
        self.bias = np.zeros(c_out)

    def forward(self, feats):
        return feats @ self.weight + self.bias

    def backward(self, d_out, feats, grads, prefix):
        grads[prefix + ".weight"] += feats.T @ d_out
        grads[prefix + ".bias"] += d_out.sum(axis=0)
        return d_out @ self.weight.T

    def param_items(self, prefix):
        return [(prefix + ".weight", self.weight), (prefix + ".bias", self.bias)]


# --- the U-Net --------------------------------------------------------------

# (kind, stride, in multiplier, out multiplier) with multipliers of the base
# width; input has 3 color channels.
_SCHEDULE = [
    ("conv", 1, None, 1),
    ("conv", 2, 1, 1),
    ("conv", 1, 1, 1),
    ("conv", 2, 1, 2),
    ("conv", 1, 2, 2),
    ("conv", 2, 2, 4),
    ("conv", 1, 4, 4),
    ("deconv", 2, 4, 2),
    ("deconv", 2, 2, 1),
    ("deconv", 2, 1, 1),
]
_SKIP_AFTER = {7: 4, 8: 2, 9: 0}  # decoder layer -> encoder layer supplying the skip


class FeatureNet:
    """Encoder-decoder over the sparse voxel grid producing C = base_channels features."""

    def __init__(self, base_channels=8, seed=0):
        rng = np.random.default_rng(seed)
        self.base_channels = base_channels
        self.layers = []
        for kind, stride, m_in, m_out in _SCHEDULE:
            c_in = 3 if m_in is None else m_in * base_channels
            self.layers.append(ConvLayer(c_in, m_out * base_channels, stride,
                                         kind == "deconv", rng))
        self.mixes = {}
        for li, src in _SKIP_AFTER.items():
            c_dec = _SCHEDULE[li][3] * base_channels
            self.mixes[li] = MixLayer(2 * c_dec, c_dec, rng)
        self.grads = {}

    # -- parameter plumbing --
    def param_items(self):
        items = []
        for i, layer in enumerate(self.layers):
            items.extend(layer.param_items(f"conv{i}"))
        for li in sorted(self.mixes):
            items.extend(self.mixes[li].param_items(f"mix{li}"))
        return items

    def state_items(self):
        items = []
        for i, layer in enumerate(self.layers):
            items.extend(layer.state_items(f"conv{i}"))
        return items

    def zero_grads(self):
        self.grads = {name: np.zeros_like(arr) for name, arr in self.param_items()}

    def build_plan(self, tensor: SparseVoxelTensor):
        """Precompute per-layer neighbor maps for a key set (cache per scene)."""
        if np.any(tensor.dims % 8 != 0):
            raise VolumeError(f"grid dims {tuple(tensor.dims)} not divisible by 8")
        keys, dims = tensor.keys, tensor.dims.copy()
        plan = []
        for layer in self.layers:
            (out_keys, maps), out_dims = layer.out_keys_and_maps(keys, dims)
            plan.append({"maps": maps, "out_keys": out_keys, "n_in": keys.size})
            keys, dims = out_keys, out_dims
        return plan

    def forward(self, tensor: SparseVoxelTensor, train=False, plan=None):
        if plan is None:
            plan = self.build_plan(tensor)
        feats = tensor.features
        ctx = {"tensor": tensor, "steps": []}
        outputs = {}
        for i, layer in enumerate(self.layers):
            maps = plan[i]["maps"]
            out_keys = plan[i]["out_keys"]
            out, lctx = layer.forward(feats, maps, out_keys, train)
            step = {"layer": i, "maps": maps, "in_feats": feats,
                    "n_in": plan[i]["n_in"], "lctx": lctx, "out_keys": out_keys}
            if i in _SKIP_AFTER:
                src = _SKIP_AFTER[i]
                src_keys, src_feats = outputs[src]
                match = np.searchsorted(src_keys, out_keys)
                match = np.clip(match, 0, max(src_keys.size - 1, 0))
                found = src_keys[match] == out_keys
                skip = np.zeros((out_keys.size, src_feats.shape[1]))
                skip[found] = src_feats[match[found]]
                cat = np.concatenate([out, skip], axis=1)
                mixed = self.mixes[i].forward(cat)
                step.update({"cat": cat, "match": match, "found": found, "src": src})
                out = mixed
            outputs[i] = (out_keys, out)
            ctx["steps"].append(step)
            feats = out
        ctx["outputs"] = outputs
        volume = FeatureVolume(out_keys, feats, tensor.dims.copy(), tensor.origin,
                               tensor.voxel_size)
        return volume, ctx

    def backward(self, ctx, d_out):
        """Accumulate parameter gradients; returns gradient wrt input features."""
        if not self.grads:
            self.zero_grads()
        pending = {i: None for i in range(len(self.layers))}
        pending[len(self.layers) - 1] = d_out
        d_in_final = None
        for step in reversed(ctx["steps"]):
            i = step["layer"]
            d = pending[i]
            if d is None:
                continue
            layer = self.layers[i]
            if i in _SKIP_AFTER:
                d_cat = self.mixes[i].backward(d, step["cat"], self.grads, f"mix{i}")
                c_dec = self.layers[i].weight.shape[2]
                d = d_cat[:, :c_dec]
                d_skip = d_cat[:, c_dec:]
                src = step["src"]
                src_grad = np.zeros_like(ctx["outputs"][src][1])
                np.add.at(src_grad, step["match"][step["found"]], d_skip[step["found"]])
                if pending[src] is None:
                    pending[src] = src_grad
                else:
                    pending[src] = pending[src] + src_grad
            d_prev = layer.backward(d, step["lctx"], step["in_feats"], step["maps"],
                                    step["n_in"], self.grads, f"conv{i}")
            if i == 0:
                d_in_final = d_prev
            else:
                if pending[i - 1] is None:
                    pending[i - 1] = d_prev
                else:
                    pending[i - 1] = pending[i - 1] + d_prev
        return d_in_final
