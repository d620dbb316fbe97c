"""Architectures, width scaling, the training loop, and checkpointing.

Three architecture families share one layer vocabulary:

* ``smallcnn``   — 3 conv stages, the desk-scale smoke model.
* ``smallresnet`` — 3 stages x 2 shortcut blocks, base width 16; mirrors the
  ResNet18 topology at a fraction of the parameters.
* ``resnet18``   — the full-width 4-stage variant.

First and last layers stay full precision under every binary scheme, and
every conv in the resnet family carries a real-valued shortcut.  Input
normalization is folded into the forward pass so attacks operate in raw
[0,1] pixel space.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .binarize import (SchemeId, SchemeState, binarize_activations,
                       binarize_weights, ConfigError)

CHECKPOINT_MAGIC = b"ARBB"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss); carries the epoch index."""

    def __init__(self, epoch, message):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


class FormatError(ValueError):
    """Checkpoint file is malformed; carries the byte offset."""

    def __init__(self, offset, message):
        super().__init__(f"at byte {offset}: {message}")
        self.offset = offset


@dataclass
class ModelConfig:
    architecture: str = "smallresnet"   # smallcnn | smallresnet | resnet18
    width: float = 1.0
    num_classes: int = 10
    input_hw: tuple = (32, 32)
    in_channels: int = 3
    scheme: SchemeId = SchemeId.FP32
    input_mean: float = 0.5
    input_std: float = 0.25

    def __post_init__(self):
        self.scheme = SchemeId(self.scheme)
        self.input_hw = tuple(self.input_hw)
        if self.width <= 0 or self.num_classes < 2:
            raise ConfigError("width must be positive and num_classes >= 2")


@dataclass
class TrainConfig:
    epochs: int = 10
    optimizer: str = "adam"             # adam | sgd
    schedule: str = "multistep"         # multistep | cosine
    lr: float = 1e-3
    lr_steps: tuple = (50, 75)
    warmup_epochs: int = 0
    weight_decay: float = 0.0
    batch_size: int = 128
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.lr < 0:
            raise ConfigError("epochs >= 1 and lr >= 0 required")


def _scaled(c, width):
    return max(1, math.ceil(c * width))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Layer:
    def named_params(self):
        return []

    def buffers(self):
        return []

    def forward(self, g, x, training):
        raise NotImplementedError


class Conv2d(Layer):
    """Conv layer, optionally binarized per the model's scheme."""

    def __init__(self, rng, cin, cout, k=3, stride=1, pad=1,
                 scheme=SchemeId.FP32, binarized=False, bias=False):
        fan_in = cin * k * k
        std = math.sqrt(2.0 / fan_in)
        self.w = ad.Var(rng.normal(0, std, (cout, cin, k, k)).astype(np.float32),
                        requires_grad=True)
        self.b = ad.Var(np.zeros(cout, np.float32), requires_grad=True) if bias else None
        self.stride, self.pad = stride, pad
        self.binarized = binarized and scheme is not SchemeId.FP32
        self.scheme = scheme if self.binarized else SchemeId.FP32
        self.state = (SchemeState.create(scheme, cout, cin) if self.binarized else None)

    def named_params(self):
        out = [("w", self.w)]
        if self.b is not None:
            out.append(("b", self.b))
        if self.state is not None:
            if self.state.gamma is not None:
                out.append(("gamma", self.state.gamma))
            if self.state.beta is not None:
                out.append(("beta", self.state.beta))
        return out

    def forward(self, g, x, training):
        if not self.binarized:
            return ad.conv2d(g, x, self.w, self.b, self.stride, self.pad)
        ab = binarize_activations(g, self.state, x)
        wb, alpha = binarize_weights(g, self.state, self.w)
        y = ad.conv2d(g, ab, wb, None, self.stride, self.pad)
        alpha = np.asarray(alpha, dtype=np.float32)
        scale = alpha.reshape(1, -1, 1, 1) if alpha.ndim else alpha
        y = ad.mul(g, y, ad.Var(scale))
        if self.scheme is SchemeId.XNORPP:
            y = ad.mul(g, y, ad.reshape(g, self.state.gamma, (1, -1, 1, 1)))
        if self.b is not None:
            y = ad.add(g, y, ad.reshape(g, self.b, (1, -1, 1, 1)))
        return y

    def clip_latent(self):
        if self.binarized:
            np.clip(self.w.data, -1.0, 1.0, out=self.w.data)


class Linear(Layer):
    def __init__(self, rng, fin, fout, bias=True):
        std = math.sqrt(1.0 / fin)
        self.w = ad.Var(rng.normal(0, std, (fout, fin)).astype(np.float32),
                        requires_grad=True)
        self.b = ad.Var(np.zeros(fout, np.float32), requires_grad=True) if bias else None

    def named_params(self):
        return [("w", self.w)] + ([("b", self.b)] if self.b is not None else [])

    def forward(self, g, x, training):
        return ad.linear(g, x, self.w, self.b)


class BatchNorm2d(Layer):
    def __init__(self, c, momentum=0.1):
        self.gamma = ad.Var(np.ones(c, np.float32), requires_grad=True)
        self.beta = ad.Var(np.zeros(c, np.float32), requires_grad=True)
        self.running_mean = np.zeros(c, np.float32)
        self.running_var = np.ones(c, np.float32)
        self.momentum = momentum

    def named_params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, g, x, training):
        return ad.batchnorm2d(g, x, self.gamma, self.beta, self.running_mean,
                              self.running_var, training, self.momentum)


class HardTanh(Layer):
    def forward(self, g, x, training):
        return ad.hardtanh(g, x)


class PReLU(Layer):
    def __init__(self, c, init=0.25):
        self.slope = ad.Var(np.full(c, init, np.float32), requires_grad=True)

    def named_params(self):
        return [("slope", self.slope)]

    def forward(self, g, x, training):
        return ad.prelu(g, x, self.slope)


class RPReLU(Layer):
    """Shifted PReLU with learnable per-channel input/output shifts."""

    def __init__(self, c, init=0.25):
        self.shift_in = ad.Var(np.zeros(c, np.float32), requires_grad=True)
        self.shift_out = ad.Var(np.zeros(c, np.float32), requires_grad=True)
        self.slope = ad.Var(np.full(c, init, np.float32), requires_grad=True)

    def named_params(self):
        return [("shift_in", self.shift_in), ("shift_out", self.shift_out),
                ("slope", self.slope)]

    def forward(self, g, x, training):
        si = ad.reshape(g, ad.mul(g, self.shift_in, ad.Var(np.float32(-1.0))),
                        (1, -1, 1, 1))
        h = ad.prelu(g, ad.add(g, x, si), self.slope)
        return ad.add(g, h, ad.reshape(g, self.shift_out, (1, -1, 1, 1)))


class AvgPool(Layer):
    def __init__(self, k=2):
        self.k = k

    def forward(self, g, x, training):
        return ad.avg_pool2d(g, x, self.k)


def _activation(scheme, c):
    if scheme is SchemeId.FP32:
        return PReLU(c)
    if scheme is SchemeId.REACTNET:
        return RPReLU(c)
    return HardTanh()


class ConvUnit(Layer):
    """conv -> BN -> (shortcut add) -> activation; the resnet building brick."""

    def __init__(self, rng, cin, cout, stride, scheme, shortcut):
        self.conv = Conv2d(rng, cin, cout, 3, stride, 1, scheme, binarized=True)
        self.bn = BatchNorm2d(cout)
        self.act = _activation(scheme, cout)
        self.shortcut = shortcut
        self.down = None
        if shortcut and (stride != 1 or cin != cout):
            # real-valued projection shortcut: avgpool then FP 1x1 conv
            self.pool = AvgPool(stride) if stride != 1 else None
            self.down = Conv2d(rng, cin, cout, 1, 1, 0, SchemeId.FP32)

    def named_params(self):
        out = [(f"conv.{n}", p) for n, p in self.conv.named_params()]
        out += [(f"bn.{n}", p) for n, p in self.bn.named_params()]
        out += [(f"act.{n}", p) for n, p in self.act.named_params()]
        if self.down is not None:
            out += [(f"down.{n}", p) for n, p in self.down.named_params()]
        return out

    def buffers(self):
        return [(f"bn.{n}", b) for n, b in self.bn.buffers()]

    def forward(self, g, x, training):
        h = self.conv.forward(g, x, training)
        h = self.bn.forward(g, h, training)
        if self.shortcut:
            sc = x
            if self.down is not None:
                if self.pool is not None:
                    sc = self.pool.forward(g, sc, training)
                sc = self.down.forward(g, sc, training)
            h = ad.add(g, h, sc)
        return self.act.forward(g, h, training)


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def named_params(self):
        out = []
        for i, layer in enumerate(self.layers):
            out += [(f"{i}.{n}", p) for n, p in layer.named_params()]
        return out

    def buffers(self):
        out = []
        for i, layer in enumerate(self.layers):
            out += [(f"{i}.{n}", b) for n, b in layer.buffers()]
        return out

    def forward(self, g, x, training):
        for layer in self.layers:
            x = layer.forward(g, x, training)
        return x


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------

class Model:
    """A classifier: feature trunk -> global average pool -> linear head."""

    def __init__(self, cfg: ModelConfig, trunk: Sequential, head: Linear):
        self.cfg = cfg
        self.trunk = trunk
        self.head = head

    # -- parameters ---------------------------------------------------------
    def named_params(self):
        out = [(f"trunk.{n}", p) for n, p in self.trunk.named_params()]
        out += [(f"head.{n}", p) for n, p in self.head.named_params()]
        return out

    def params(self):
        return [p for _, p in self.named_params()]

    def named_buffers(self):
        return [(f"trunk.{n}", b) for n, b in self.trunk.buffers()]

    def clip_latent_weights(self):
        for layer in self._all_layers(self.trunk):
            if isinstance(layer, Conv2d):
                layer.clip_latent()

    def _all_layers(self, layer):
        yield layer
        for child in getattr(layer, "layers", []):
            yield from self._all_layers(child)
        for name in ("conv", "bn", "act", "down"):
            sub = getattr(layer, name, None)
            if isinstance(sub, Layer):
                yield from self._all_layers(sub)

    def conv_layers(self):
        return [l for l in self._all_layers(self.trunk) if isinstance(l, Conv2d)]

    # -- forward ------------------------------------------------------------
    def _normalize(self, g, x: ad.Var):
        mean = np.float32(self.cfg.input_mean)
        inv_std = np.float32(1.0 / self.cfg.input_std)
        h = ad.add(g, x, ad.Var(-mean))
        return ad.mul(g, h, ad.Var(inv_std))

    def forward(self, g, x: ad.Var, training=False, return_features=False):
        if x.data.ndim != 4 or x.data.shape[1:] != (self.cfg.in_channels,) + self.cfg.input_hw:
            raise ad.ShapeError(
                f"input shape {x.data.shape} does not match model spec "
                f"(N,{self.cfg.in_channels},{self.cfg.input_hw[0]},{self.cfg.input_hw[1]})")
        h = self._normalize(g, x)
        feats = self.trunk.forward(g, h, training)
        pooled = ad.global_avg_pool(g, feats)
        logits = self.head.forward(g, pooled, training)
        if return_features:
            return logits, feats
        return logits

    def logits(self, x, batch_size=256):
        """Eval-mode logits for a raw array input, without building a graph."""
        x = np.asarray(x, dtype=np.float32)
        outs = []
        for i in range(0, len(x), batch_size):
            outs.append(self.forward(None, ad.Var(x[i:i + batch_size])).data)
        return np.concatenate(outs, axis=0)

    def predict(self, x, batch_size=256):
        return self.logits(x, batch_size).argmax(axis=1)

    def loss_and_input_grad(self, x, y, loss="ce"):
        """White-box access: returns (loss value, dL/dx) in eval mode."""
        g = ad.Graph()
        xv = ad.Var(np.asarray(x, dtype=np.float32), requires_grad=True)
        logits = self.forward(g, xv, training=False)
        lv = ad.cross_entropy(g, logits, np.asarray(y))
        g.backward(lv)
        return float(lv.data), xv.grad

    def state_dict(self):
        out = {}
        for n, p in self.named_params():
            out[n] = p.data
        for n, b in self.named_buffers():
            out[n] = b
        return out

    def load_state_dict(self, state):
        mine = dict(self.named_params())
        bufs = dict(self.named_buffers())
        for name, arr in state.items():
            if name in mine:
                if mine[name].data.shape != arr.shape:
                    raise ConfigError(f"shape mismatch for {name}")
                mine[name].data = arr.astype(np.float32).copy()
            elif name in bufs:
                bufs[name][...] = arr
            else:
                raise ConfigError(f"unknown tensor {name} in state")

    def num_params(self):
        return sum(p.data.size for p in self.params())


# ---------------------------------------------------------------------------
# architectures
# ---------------------------------------------------------------------------

def build_model(cfg: ModelConfig, init_seed=0) -> Model:
    rng = np.random.default_rng(init_seed)
    s = cfg.scheme
    w = cfg.width

    def stage(cin, cout, blocks, stride, shortcut):
        units = [ConvUnit(rng, cin, cout, stride, s, shortcut)]
        units += [ConvUnit(rng, cout, cout, 1, s, shortcut) for _ in range(blocks - 1)]
        return units

    if cfg.architecture == "smallcnn":
        c1, c2 = _scaled(16, w), _scaled(32, w)
        layers = [
            Conv2d(rng, cfg.in_channels, c1, 3, 1, 1, SchemeId.FP32),
            BatchNorm2d(c1), _activation(s, c1),
            Conv2d(rng, c1, c2, 3, 2, 1, s, binarized=True),
            BatchNorm2d(c2), _activation(s, c2),
            Conv2d(rng, c2, c2, 3, 2, 1, s, binarized=True),
            BatchNorm2d(c2), _activation(s, c2),
        ]
        feat = c2
    elif cfg.architecture == "smallresnet":
        c1, c2, c3 = _scaled(16, w), _scaled(32, w), _scaled(64, w)
        stem = [Conv2d(rng, cfg.in_channels, c1, 3, 1, 1, SchemeId.FP32),
                BatchNorm2d(c1), _activation(s, c1)]
        layers = stem + stage(c1, c1, 2, 1, True) + stage(c1, c2, 2, 2, True) \
            + stage(c2, c3, 2, 2, True)
        feat = c3
    elif cfg.architecture == "resnet18":
        c = [_scaled(64, w), _scaled(128, w), _scaled(256, w), _scaled(512, w)]
        big_input = min(cfg.input_hw) >= 128
        if big_input:
            stem = [Conv2d(rng, cfg.in_channels, c[0], 7, 2, 3, SchemeId.FP32),
                    BatchNorm2d(c[0]), _activation(s, c[0]), AvgPool(2)]
        else:
            stem = [Conv2d(rng, cfg.in_channels, c[0], 3, 1, 1, SchemeId.FP32),
                    BatchNorm2d(c[0]), _activation(s, c[0])]
        layers = stem + stage(c[0], c[0], 2, 1, True) + stage(c[0], c[1], 2, 2, True) \
            + stage(c[1], c[2], 2, 2, True) + stage(c[2], c[3], 2, 2, True)
        feat = c[3]
    else:
        raise ConfigError(f"unknown architecture {cfg.architecture!r}")
    head = Linear(rng, feat, cfg.num_classes)
    return Model(cfg, Sequential(layers), head)


# ---------------------------------------------------------------------------
# optimizers / schedules
# ---------------------------------------------------------------------------

class _Adam:
    def __init__(self, params, lr, weight_decay):
        self.params = params
        self.lr = lr
        self.wd = weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0
        self.b1, self.b2, self.eps = 0.9, 0.999, 1e-8

    def step(self, lr):
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if self.wd:
                g = g + self.wd * p.data
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


class _SGD:
    def __init__(self, params, lr, weight_decay, momentum=0.9):
        self.params = params
        self.wd = weight_decay
        self.mu = momentum
        self.buf = [np.zeros_like(p.data) for p in params]

    def step(self, lr):
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if self.wd:
                g = g + self.wd * p.data
            self.buf[i] = self.mu * self.buf[i] + g
            p.data -= (lr * self.buf[i]).astype(p.data.dtype)


def _lr_at(tc: TrainConfig, epoch):
    if epoch < tc.warmup_epochs:
        return tc.lr * (epoch + 1) / tc.warmup_epochs
    if tc.schedule == "multistep":
        return tc.lr * (0.1 ** sum(epoch >= s for s in tc.lr_steps))
    if tc.schedule == "cosine":
        span = max(tc.epochs - tc.warmup_epochs, 1)
        frac = (epoch - tc.warmup_epochs) / span
        return tc.lr * 0.5 * (1 + math.cos(math.pi * frac))
    raise ConfigError(f"unknown schedule {tc.schedule!r}")


def _augment_batch(xb, rng, pad=4):
    """Random crop (reflect pad) + horizontal flip, CIFAR-style."""
    n, c, h, w = xb.shape
    out = np.empty_like(xb)
    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    for i in range(n):
        crop = xp[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def train(model: Model, dataset, tc: TrainConfig, loss_fn=None, eval_dataset=None,
          log=None):
    """Single-writer training loop; deterministic under a fixed seed.

    ``dataset`` is any object with ``images`` (N,C,H,W in [0,1]) and
    ``labels``.  ``loss_fn(model, graph, xb, yb) -> Var`` defaults to plain
    cross-entropy; adversarial-training defenses supply their own.
    Returns a history dict with per-epoch loss/accuracy lists.
    """
    x, y = np.asarray(dataset.images, np.float32), np.asarray(dataset.labels)
    if y.max() >= model.cfg.num_classes:
        raise ConfigError("dataset label range exceeds num_classes")
    rng = np.random.default_rng(tc.seed)
    params = model.params()
    opt = _Adam(params, tc.lr, tc.weight_decay) if tc.optimizer == "adam" \
        else _SGD(params, tc.lr, tc.weight_decay)
    history = {"train_loss": [], "train_acc": [], "eval_acc": [], "lr": []}
    for epoch in range(tc.epochs):
        lr = _lr_at(tc, epoch)
        order = rng.permutation(len(x))
        losses, correct = [], 0
        for i in range(0, len(x), tc.batch_size):
            idx = order[i:i + tc.batch_size]
            xb = x[idx]
            if tc.augment:
                xb = _augment_batch(xb, rng)
            yb = y[idx]
            g = ad.Graph()
            for p in params:
                p.grad = None
            if loss_fn is None:
                logits = model.forward(g, ad.Var(xb), training=True)
                loss = ad.cross_entropy(g, logits, yb)
            else:
                loss, logits = loss_fn(model, g, xb, yb)
            if not np.isfinite(loss.data):
                raise TrainingError(epoch, "non-finite loss")
            g.backward(loss)
            opt.step(lr)
            model.clip_latent_weights()
            losses.append(float(loss.data))
            correct += int((logits.data.argmax(axis=1) == yb).sum())
        history["train_loss"].append(float(np.mean(losses)))
        history["train_acc"].append(correct / len(x))
        history["lr"].append(lr)
        if eval_dataset is not None:
            acc = float((model.predict(eval_dataset.images) == eval_dataset.labels).mean())
            history["eval_acc"].append(acc)
        if log:
            ev = history["eval_acc"][-1] if eval_dataset is not None else None
            log(f"epoch {epoch}: loss={history['train_loss'][-1]:.4f} "
                f"train_acc={history['train_acc'][-1]:.3f}"
                + (f" eval_acc={ev:.3f}" if ev is not None else ""))
    return history


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def save_checkpoint(model: Model, path, class_names=None, extra=None):
    state = model.state_dict()
    names = list(state.keys())
    meta = {
        "config": {**asdict(model.cfg), "scheme": model.cfg.scheme.value,
                   "input_hw": list(model.cfg.input_hw)},
        "tensors": [{"name": n, "shape": list(state[n].shape)} for n in names],
        "class_names": class_names,
        "extra": extra or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        for n in names:
            f.write(np.ascontiguousarray(state[n], dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (model, metadata).  Bit-exact parameter round trip."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(0, f"bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(4, f"unsupported checkpoint version {version}, "
                             f"this build reads version {CHECKPOINT_VERSION}")
    (meta_len,) = struct.unpack_from("<I", blob, 8)
    if len(blob) < 12 + meta_len:
        raise FormatError(12, f"truncated metadata: need {meta_len} bytes, "
                              f"have {len(blob) - 12}")
    meta = json.loads(blob[12:12 + meta_len].decode("utf-8"))
    cfg_d = dict(meta["config"])
    cfg = ModelConfig(**cfg_d)
    model = build_model(cfg)
    offset = 12 + meta_len
    state = {}
    for spec in meta["tensors"]:
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = n * 4
        if offset + nbytes > len(blob):
            raise FormatError(offset, f"truncated payload for tensor {spec['name']}: "
                                      f"need {nbytes} bytes, have {len(blob) - offset}")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
        state[spec["name"]] = arr.reshape(spec["shape"]).copy()
        offset += nbytes
    if offset != len(blob):
        raise FormatError(offset, f"{len(blob) - offset} trailing bytes")
    model.load_state_dict(state)
    return model, meta
