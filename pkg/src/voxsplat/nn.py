"""Small dense-network toolkit: MLPs with hand-written adjoints, Adam."""

import numpy as np


class MLP:
    """ReLU MLP; ``dims`` lists layer widths, e.g. (in, 64, 64, out)."""

    def __init__(self, dims, rng=None, final_scale=1e-2):
        rng = rng or np.random.default_rng(0)
        self.weights = []
        self.biases = []
        for i in range(len(dims) - 1):
            scale = np.sqrt(2.0 / dims[i])
            if i == len(dims) - 2:
                scale = final_scale / np.sqrt(dims[i])
            self.weights.append(rng.normal(0.0, scale, size=(dims[i], dims[i + 1])))
            # small positive hidden bias keeps units off the ReLU kink for
            # all-zero input rows; the output layer stays at zero
            bias0 = 0.0 if i == len(dims) - 2 else 1e-2
            self.biases.append(np.full(dims[i + 1], bias0))
        self.grads = {}

    @property
    def dims(self):
        return tuple([self.weights[0].shape[0]] + [w.shape[1] for w in self.weights])

    def forward(self, x):
        x = np.atleast_2d(x)
        hs = [x]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = hs[-1] @ w + b
            if i < len(self.weights) - 1:
                z = np.maximum(z, 0.0)
            hs.append(z)
        return hs[-1], hs

    def backward(self, hs, d_out, prefix, grads):
        """Accumulate weight gradients into ``grads``; returns d_input."""
        d = np.atleast_2d(d_out)
        for i in reversed(range(len(self.weights))):
            if i < len(self.weights) - 1:
                d = d * (hs[i + 1] > 0)
            grads[prefix + f".w{i}"] += hs[i].T @ d
            grads[prefix + f".b{i}"] += d.sum(axis=0)
            d = d @ self.weights[i].T
        return d

    def param_items(self, prefix):
        items = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            items.append((prefix + f".w{i}", w))
            items.append((prefix + f".b{i}", b))
        return items

    def zero_like_grads(self, prefix):
        return {name: np.zeros_like(arr) for name, arr in self.param_items(prefix)}


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def d_sigmoid(y):
    return y * (1.0 - y)


def normalize_rows(x, eps=1e-12):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norm, eps), norm


def d_normalize_rows(x, norm, d_out):
    """Adjoint of row normalization y = x / |x|."""
    y = x / norm
    return (d_out - y * (d_out * y).sum(axis=-1, keepdims=True)) / norm


class Adam:
    """Adaptive-moment optimizer over a named parameter dict."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params  # dict name -> array (updated in place)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
