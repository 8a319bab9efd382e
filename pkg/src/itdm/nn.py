"""Small feedforward networks with manual backpropagation.

A :class:`Model` is a feature extractor (a list of layers ending in the last
hidden layer) followed by a linear classifier. :func:`backward` accepts an extra
gradient at the feature layer so a loss defined on the features can be folded
into the same backward pass as the cross-entropy.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from itdm.tensor import DTYPE, as_tensor

CHECKPOINT_VERSION = 1


class Dense:
    kind = "dense"

    def __init__(self, n_in, n_out, relu=True):
        self.n_in, self.n_out, self.relu = n_in, n_out, relu
        self.params = {
            "W": np.zeros((n_in, n_out), dtype=DTYPE),
            "b": np.zeros(n_out, dtype=DTYPE),
        }

    def init(self, rng):
        self.params["W"][...] = rng.normal(0.0, np.sqrt(2.0 / self.n_in), self.params["W"].shape)
        self.params["b"][...] = 0.0

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"dense layer expects (m, {self.n_in}), got {x.shape}")
        z = x @ self.params["W"] + self.params["b"]
        out = np.maximum(z, 0.0) if self.relu else z
        return out, (x, z)

    def backward(self, dout, cache):
        x, z = cache
        dz = dout * (z > 0) if self.relu else dout
        grads = {"W": x.T @ dz, "b": dz.sum(axis=0)}
        return dz @ self.params["W"].T, grads

    def spec(self):
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out, "relu": self.relu}


class Conv2D:
    """3x3-style convolution, stride 1, zero padding, optional ReLU. Input is NCHW."""

    kind = "conv2d"

    def __init__(self, c_in, c_out, size=3, pad=1, relu=True):
        self.c_in, self.c_out, self.size, self.pad, self.relu = c_in, c_out, size, pad, relu
        self.params = {
            "W": np.zeros((c_out, c_in, size, size), dtype=DTYPE),
            "b": np.zeros(c_out, dtype=DTYPE),
        }

    def init(self, rng):
        fan_in = self.c_in * self.size * self.size
        self.params["W"][...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), self.params["W"].shape)
        self.params["b"][...] = 0.0

    def _cols(self, x):
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, (self.size, self.size), axis=(2, 3))
        n, c, oh, ow = win.shape[:4]
        # rows: (sample, out_y, out_x); columns: (channel, ky, kx)
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * self.size**2), oh, ow

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ValueError(f"conv layer expects (m, {self.c_in}, H, W), got {x.shape}")
        cols, oh, ow = self._cols(x)
        z = cols @ self.params["W"].reshape(self.c_out, -1).T + self.params["b"]
        z = z.reshape(x.shape[0], oh, ow, self.c_out).transpose(0, 3, 1, 2)
        out = np.maximum(z, 0.0) if self.relu else z
        return out, (x.shape, cols, z)

    def backward(self, dout, cache):
        x_shape, cols, z = cache
        dz = dout * (z > 0) if self.relu else dout
        n, _, oh, ow = dz.shape
        dz_rows = dz.transpose(0, 2, 3, 1).reshape(n * oh * ow, self.c_out)
        grads = {
            "W": (dz_rows.T @ cols).reshape(self.params["W"].shape),
            "b": dz_rows.sum(axis=0),
        }
        dcols = (dz_rows @ self.params["W"].reshape(self.c_out, -1)).reshape(
            n, oh, ow, self.c_in, self.size, self.size
        )
        p = self.pad
        dxp = np.zeros((n, self.c_in, x_shape[2] + 2 * p, x_shape[3] + 2 * p), dtype=DTYPE)
        for ky in range(self.size):
            for kx in range(self.size):
                dxp[:, :, ky:ky + oh, kx:kx + ow] += dcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:p + x_shape[2], p:p + x_shape[3]]
        return dx, grads

    def spec(self):
        return {"kind": self.kind, "c_in": self.c_in, "c_out": self.c_out,
                "size": self.size, "pad": self.pad, "relu": self.relu}


class MaxPool2:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""

    kind = "maxpool2"

    def __init__(self):
        self.params = {}

    def init(self, rng):
        pass

    def forward(self, x):
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        blocks = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, h2, w2, 4)
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return out, (x.shape, arg)

    def backward(self, dout, cache):
        x_shape, arg = cache
        n, c, h, w = x_shape
        h2, w2 = h // 2, w // 2
        dblocks = np.zeros((n, c, h2, w2, 4), dtype=DTYPE)
        np.put_along_axis(dblocks, arg[..., None], dout[..., None], axis=-1)
        dblocks = dblocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(x_shape, dtype=DTYPE)
        dx[:, :, :2 * h2, :2 * w2] = dblocks.reshape(n, c, 2 * h2, 2 * w2)
        return dx, {}

    def spec(self):
        return {"kind": self.kind}


class Flatten:
    kind = "flatten"

    def __init__(self):
        self.params = {}

    def init(self, rng):
        pass

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache):
        return dout.reshape(cache), {}

    def spec(self):
        return {"kind": self.kind}


_LAYER_TYPES = {cls.kind: cls for cls in (Dense, Conv2D, MaxPool2, Flatten)}


def _layer_from_spec(spec):
    spec = dict(spec)
    cls = _LAYER_TYPES[spec.pop("kind")]
    return cls(**spec)


@dataclass
class Model:
    extractor: list
    classifier: Dense
    input_shape: tuple
    arch: str = "custom"
    updates: int = 0

    def __post_init__(self):
        if self.classifier.relu:
            raise ValueError("the classifier must be linear")
        self.input_shape = tuple(self.input_shape)

    @property
    def feature_dim(self):
        return self.classifier.n_in

    @property
    def num_classes(self):
        return self.classifier.n_out

    def layers(self):
        return [*self.extractor, self.classifier]

    def named_parameters(self):
        """Ordered ``(name, array)`` pairs; arrays are live views into the model."""
        out = []
        for i, layer in enumerate(self.extractor):
            for key, arr in layer.params.items():
                out.append((f"extractor.{i}.{key}", arr))
        for key, arr in self.classifier.params.items():
            out.append((f"classifier.{key}", arr))
        return out

    def parameters(self):
        return dict(self.named_parameters())

    def num_parameters(self):
        return sum(arr.size for _, arr in self.named_parameters())

    def copy(self):
        clone = Model(
            [_layer_from_spec(layer.spec()) for layer in self.extractor],
            _layer_from_spec(self.classifier.spec()),
            self.input_shape,
            self.arch,
        )
        for (_, dst), (_, src) in zip(clone.named_parameters(), self.named_parameters()):
            dst[...] = src
        return clone


@dataclass
class ForwardCache:
    layer_caches: list
    features: np.ndarray
    logits: np.ndarray
    batch_size: int
    model_id: int
    model_updates: int


def _prepare_input(model, x):
    x = as_tensor(x)
    m = x.shape[0]
    if int(np.prod(x.shape[1:])) != int(np.prod(model.input_shape)):
        raise ValueError(f"input of shape {x.shape[1:]} does not match model input {model.input_shape}")
    return x.reshape((m, *model.input_shape))


def forward(model, x):
    """Run the network on a batch; returns ``(cache, features, logits)``."""
    h = _prepare_input(model, x)
    caches = []
    for layer in model.extractor:
        h, c = layer.forward(h)
        caches.append(c)
    features = h
    logits, c = model.classifier.forward(features)
    caches.append(c)
    cache = ForwardCache(caches, features, logits, features.shape[0], id(model), model.updates)
    return cache, features, logits


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of the true labels and its gradient with respect to the logits."""
    logits = as_tensor(logits, 2, "logits")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    m, k = logits.shape
    if labels.shape[0] != m:
        raise ValueError(f"{m} logit rows but {labels.shape[0]} labels")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label index out of range for {k} classes")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(m)
    loss = float(np.mean(log_norm - z[rows, labels]))
    dlogits = np.exp(z - log_norm[:, None])
    dlogits[rows, labels] -= 1.0
    return loss, dlogits / m


def backward(model, cache, dlogits=None, dfeatures_extra=None):
    """Reverse-mode gradients for every parameter of ``model``.

    ``dlogits`` is the loss gradient at the classifier output and
    ``dfeatures_extra`` an additional gradient injected at the feature layer.
    Either may be ``None``. When ``dlogits`` is ``None`` the classifier gets
    zero gradient. Returns a dict keyed like :meth:`Model.parameters`.
    """
    if dlogits is None and dfeatures_extra is None:
        raise ValueError("backward needs dlogits, dfeatures_extra, or both")
    if cache.model_id != id(model) or len(cache.layer_caches) != len(model.extractor) + 1:
        raise ValueError("forward cache was produced by a different model")
    if cache.model_updates != model.updates:
        raise ValueError("forward cache is stale: the model was updated after the forward pass")
    m = cache.batch_size
    grads = {}
    if dlogits is not None:
        dlogits = as_tensor(dlogits, 2, "dlogits")
        if dlogits.shape != (m, model.num_classes):
            raise ValueError(f"dlogits shape {dlogits.shape} does not match cache")
        dfeat, cgrads = model.classifier.backward(dlogits, cache.layer_caches[-1])
    else:
        dfeat = np.zeros((m, model.feature_dim), dtype=DTYPE)
        cgrads = {k: np.zeros_like(v) for k, v in model.classifier.params.items()}
    if dfeatures_extra is not None:
        dfeatures_extra = as_tensor(dfeatures_extra, 2, "dfeatures_extra")
        if dfeatures_extra.shape != dfeat.shape:
            raise ValueError(f"dfeatures_extra shape {dfeatures_extra.shape} does not match {dfeat.shape}")
        dfeat = dfeat + dfeatures_extra

    d = dfeat
    for i in range(len(model.extractor) - 1, -1, -1):
        d, lgrads = model.extractor[i].backward(d, cache.layer_caches[i])
        for key, g in lgrads.items():
            grads[f"extractor.{i}.{key}"] = g
    for key, g in cgrads.items():
        grads[f"classifier.{key}"] = g
    return {name: grads[name] for name, _ in model.named_parameters()}


def add_grads(a, b):
    return {k: a[k] + b[k] for k in a}


@dataclass
class Optimizer:
    """SGD with heavy-ball momentum: ``v = mu*v + g``, ``theta -= lr*v``."""

    lr: float
    momentum: float = 0.0
    velocity: dict = field(default_factory=dict)

    @classmethod
    def for_model(cls, model, lr, momentum=0.0):
        return cls(lr, momentum, {k: np.zeros_like(v) for k, v in model.named_parameters()})


def sgd_momentum_step(optimizer, model, grads):
    params = model.parameters()
    if set(grads) != set(params):
        raise ValueError("gradient keys do not match model parameters")
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {theta.shape}")
        v = optimizer.velocity.setdefault(name, np.zeros_like(theta))
        v *= optimizer.momentum
        v += g
        theta -= optimizer.lr * v
    model.updates += 1
    if not all(np.all(np.isfinite(p)) for p in params.values()):
        raise FloatingPointError("parameters became non-finite")


def default_architectures(kind, input_shape, feature_dim, num_classes, rng):
    """Build and He-initialize one of the two stock networks.

    ``mlp``: dense(in, 64)-ReLU-dense(64, d)-ReLU. ``smallcnn``: two
    conv3x3-ReLU-maxpool2 stages with 8 and 16 channels, then dense(-, d)-ReLU.
    Both end in a linear classifier dense(d, K).
    """
    input_shape = tuple(int(s) for s in np.atleast_1d(input_shape))
    if feature_dim < 1 or num_classes < 1:
        raise ValueError("feature_dim and num_classes must be positive")
    if kind == "mlp":
        n_in = int(np.prod(input_shape))
        extractor = [Dense(n_in, 64), Dense(64, feature_dim)]
        shape = (n_in,)
    elif kind == "smallcnn":
        if len(input_shape) == 2:
            input_shape = (1, *input_shape)
        if len(input_shape) != 3:
            raise ValueError(f"smallcnn needs (H, W) or (C, H, W) input, got {input_shape}")
        c, h, w = input_shape
        if h < 4 or w < 4:
            raise ValueError("smallcnn needs images of at least 4x4")
        flat = 16 * (h // 2 // 2) * (w // 2 // 2)
        extractor = [
            Conv2D(c, 8), MaxPool2(),
            Conv2D(8, 16), MaxPool2(),
            Flatten(), Dense(flat, feature_dim),
        ]
        shape = input_shape
    else:
        raise ValueError(f"unsupported architecture {kind!r}")
    model = Model(extractor, Dense(feature_dim, num_classes, relu=False), shape, kind)
    for layer in model.layers():
        layer.init(rng)
    return model


def save_model(model, path):
    """Write shapes, layer specs, and raw float64 parameters to an ``.npz`` file."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "arch": model.arch,
        "input_shape": list(model.input_shape),
        "extractor": [layer.spec() for layer in model.extractor],
        "classifier": model.classifier.spec(),
    }
    arrays = {name: arr for name, arr in model.named_parameters()}
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.array(json.dumps(meta)), **arrays)


def load_model(path):
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        model = Model(
            [_layer_from_spec(s) for s in meta["extractor"]],
            _layer_from_spec(meta["classifier"]),
            tuple(meta["input_shape"]),
            meta["arch"],
        )
        for name, arr in model.named_parameters():
            stored = data[name]
            if stored.shape != arr.shape:
                raise ValueError(f"checkpoint entry {name} has shape {stored.shape}, expected {arr.shape}")
            arr[...] = stored
    return model
