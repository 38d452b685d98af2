"""MLP classifier / generator / critic, FGSM and checkpoint persistence."""
from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from evuq import autodiff as ad
from evuq.autodiff import Tape, Tensor

HEADS = ("evidence", "softmax", "linear")
ACTIVATIONS = ("relu", "softplus")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple
    output_dim: int
    head: str = "linear"
    activation: str = "relu"  # evidence activation; hidden layers are always relu

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if len(self.hidden) < 1:
            raise ValueError("an MLP needs at least one hidden layer")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown evidence activation {self.activation!r}")
        if self.input_dim < 1 or self.output_dim < 1 or min(self.hidden) < 1:
            raise ValueError("layer widths must be positive")

    def encode(self) -> str:
        hidden = ",".join(str(h) for h in self.hidden)
        return f"{self.input_dim}:{hidden}:{self.output_dim}:{self.head}:{self.activation}"

    @classmethod
    def decode(cls, text: str) -> "MlpSpec":
        i, hidden, o, head, act = text.split(":")
        return cls(int(i), tuple(int(h) for h in hidden.split(",")), int(o), head, act)


class Mlp:
    """Fully connected relu network; parameters are ``[W0, b0, W1, b1, ...]``."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator | None = None, zero_last=False):
        self.spec = spec
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = (spec.input_dim, *spec.hidden, spec.output_dim)
        self.params: list[Tensor] = []
        for li, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=(fan_out,))
            if zero_last and li == len(dims) - 2:
                w[:] = 0.0
                b[:] = 0.0
            self.params += [Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)]

    @property
    def param_names(self):
        n = len(self.params) // 2
        return [f"{kind}{i}" for i in range(n) for kind in ("W", "b")]

    def _check_input(self, x: Tensor):
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ad.ShapeError(f"expected input of shape (N, {self.spec.input_dim}), got {x.shape}")

    def logits(self, x, frozen=False) -> Tensor:
        x = ad.as_tensor(x)
        self._check_input(x)
        params = [p.detach() for p in self.params] if frozen else self.params
        h = x
        n = len(params) // 2
        for i in range(n):
            h = ad.matmul(h, params[2 * i]) + params[2 * i + 1]
            if i < n - 1:
                h = ad.relu(h)
        return h

    def forward(self, x, frozen=False) -> Tensor:
        return self.logits(x, frozen)

    __call__ = forward

    def state(self) -> dict:
        return {name: p.data for name, p in zip(self.param_names, self.params)}

    def load_state(self, state: dict):
        for name, p in zip(self.param_names, self.params):
            arr = state[name]
            if arr.shape != p.shape:
                raise ad.ShapeError(f"{name}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = np.array(arr, dtype=p.data.dtype)

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self.params:
            h.update(p.data.tobytes())
        return h.hexdigest()


EVIDENCE_BIAS_INIT = 1.0


class Classifier(Mlp):
    """Evidence head: ``alpha = act(logits) + 1``. Softmax head: class probabilities.

    Evidence heads start with output bias ``EVIDENCE_BIAS_INIT`` so every class
    begins with non-zero evidence; otherwise relu classes whose logits start
    negative receive no gradient at all.
    """

    def __init__(self, spec: MlpSpec, rng=None, zero_last=False):
        super().__init__(spec, rng, zero_last)
        if spec.head == "evidence" and not zero_last:
            self.params[-1].data[:] = EVIDENCE_BIAS_INIT

    def forward(self, x, frozen=False) -> Tensor:
        z = self.logits(x, frozen)
        if self.spec.head == "evidence":
            ev = ad.relu(z) if self.spec.activation == "relu" else ad.softplus(z)
            return ev + 1.0
        if self.spec.head == "softmax":
            return ad.softmax_rows(z)
        return z

    __call__ = forward

    @property
    def is_evidential(self) -> bool:
        return self.spec.head == "evidence"

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Numpy in, numpy out (alpha or probabilities) in float64, no tape."""
        return self.forward(Tensor(x)).data.astype(np.float64)


class Generator(Mlp):
    """Maps standard-normal latents to data space.

    ``init_gain`` scales the output layer at construction; a large gain makes
    the first generated batches a broad cloud well outside the data support.
    """

    def __init__(self, spec: MlpSpec, rng=None, init_gain=1.0):
        super().__init__(spec, rng)
        self.latent_dim = spec.input_dim
        if init_gain != 1.0:
            self.params[-2].data *= init_gain
            self.params[-1].data *= init_gain

    def sample_latent(self, rng: np.random.Generator, m: int) -> np.ndarray:
        return rng.standard_normal((m, self.latent_dim))


class Discriminator(Mlp):
    def forward(self, x, frozen=False) -> Tensor:
        return ad.reshape(self.logits(x, frozen), (ad.as_tensor(x).shape[0],))

    __call__ = forward


def classifier_spec(input_dim=2, k=3, hidden=(500, 500), head="evidence", activation="relu"):
    return MlpSpec(input_dim, hidden, k, head, activation)


def generator_spec(data_dim=2, latent_dim=32, hidden=(128, 128)):
    return MlpSpec(latent_dim, hidden, data_dim, "linear")


def critic_spec(data_dim=2, hidden=(128, 128)):
    return MlpSpec(data_dim, hidden, 1, "linear")


# --------------------------------------------------------------------------
# FGSM
# --------------------------------------------------------------------------

def fgsm_perturb(c: Classifier, x: np.ndarray, y: np.ndarray, epsilon: float) -> np.ndarray:
    """``x + eps * sign(grad_x loss)`` using the classifier's own training loss."""
    from evuq import losses

    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    x = np.asarray(x)
    if epsilon == 0:
        return x.copy()
    xt = Tensor(x, requires_grad=True)
    onehot = np.eye(c.spec.output_dim)[np.asarray(y, dtype=int)]
    with Tape() as tape:
        if c.is_evidential:
            loss = losses.enn_sq_loss(c(xt, frozen=True), onehot)
        else:
            loss = losses.cross_entropy_loss(c.logits(xt, frozen=True), onehot)
        (gx,) = ad.backward(tape, loss.node, [xt])
    return (x + epsilon * np.sign(gx)).astype(x.dtype)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

MAGIC = "evuq-checkpoint 1"
END = "end"


class CheckpointError(Exception):
    pass


class CorruptManifestError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict
    meta: dict


def _fmt_shape(shape):
    return ",".join(str(s) for s in shape) if shape else "-"


def save_checkpoint(path, tensors: dict, meta: dict | None = None):
    """Write a text manifest followed by a little-endian float32 payload.

    Manifest lines: ``meta KEY VALUE`` and ``tensor NAME SHAPE OFFSET NBYTES``
    (offsets relative to the payload start), then ``payload NBYTES`` and ``end``.
    """
    meta = dict(meta or {})
    lines = [MAGIC]
    for key in sorted(meta):
        value = str(meta[key])
        if any(ch.isspace() for ch in key) or "\n" in value:
            raise ValueError(f"meta entry {key!r} must be a single token / single line")
        lines.append(f"meta {key} {value}")
    blobs, offset = [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        blob = arr.tobytes()
        lines.append(f"tensor {name} {_fmt_shape(arr.shape)} {offset} {len(blob)}")
        blobs.append(blob)
        offset += len(blob)
    lines += [f"payload {offset}", END]
    data = ("\n".join(lines) + "\n").encode("utf-8") + b"".join(blobs)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_checkpoint(path, expected_config_hash: str | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    marker = ("\n" + END + "\n").encode()
    cut = raw.find(marker)
    if not raw.startswith(MAGIC.encode()) or cut < 0:
        raise CorruptManifestError(f"{path}: missing checkpoint header or manifest terminator")
    try:
        header = raw[:cut].decode("utf-8").split("\n")
    except UnicodeDecodeError as exc:
        raise CorruptManifestError(f"{path}: manifest is not UTF-8") from exc
    payload = raw[cut + len(marker):]
    meta, entries, declared = {}, [], None
    for lineno, line in enumerate(header[1:], start=2):
        parts = line.split(" ")
        try:
            if parts[0] == "meta":
                meta[parts[1]] = line.split(" ", 2)[2] if len(parts) > 2 else ""
            elif parts[0] == "tensor":
                _, name, shape, off, nbytes = parts
                shape = () if shape == "-" else tuple(int(s) for s in shape.split(","))
                entries.append((name, shape, int(off), int(nbytes)))
            elif parts[0] == "payload":
                declared = int(parts[1])
            else:
                raise ValueError(parts[0])
        except (ValueError, IndexError) as exc:
            raise CorruptManifestError(f"{path}: bad manifest line {lineno}: {line!r}") from exc
    if declared is None:
        raise CorruptManifestError(f"{path}: manifest lacks payload size")
    if len(payload) < declared:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, manifest declares {declared}")
    if len(payload) > declared:
        raise CorruptManifestError(f"{path}: {len(payload) - declared} trailing bytes after payload")
    tensors = {}
    for name, shape, off, nbytes in entries:
        count = int(np.prod(shape)) if shape else 1
        if count * 4 != nbytes:
            raise ShapeMismatchError(f"{path}: tensor {name} shape {shape} needs {count * 4} bytes, has {nbytes}")
        if off + nbytes > declared:
            raise TruncatedPayloadError(f"{path}: tensor {name} extends past the payload")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off)
        tensors[name] = arr.reshape(shape).astype(np.float32)
    if expected_config_hash is not None and meta.get("config_hash") != expected_config_hash:
        warnings.warn(
            f"checkpoint config hash {meta.get('config_hash')} does not match expected {expected_config_hash}",
            stacklevel=2)
    return Checkpoint(tensors, meta)


def _prefixed(prefix, state):
    return {f"{prefix}.{k}": v for k, v in state.items()}


def _adam_tensors(prefix, model, state):
    out = {}
    for name, m, v in zip(model.param_names, state.m, state.v):
        out[f"{prefix}.adam.m.{name}"] = m
        out[f"{prefix}.adam.v.{name}"] = v
    return out


def save_models(path, models: dict, optimizers: dict | None = None, meta: dict | None = None):
    """Persist named models (``classifier``/``generator``/``critic``) plus optional Adam states."""
    tensors, meta = {}, dict(meta or {})
    for key, model in models.items():
        tensors.update(_prefixed(key, model.state()))
        meta[f"spec.{key}"] = model.spec.encode()
        if isinstance(model, Generator):
            meta["latent_dim"] = model.latent_dim
    for key, st in (optimizers or {}).items():
        tensors.update(_adam_tensors(key, models[key], st))
        meta[f"adam_step.{key}"] = st.step
        meta[f"adam_lr.{key}"] = repr(st.lr)
        meta[f"adam_betas.{key}"] = f"{st.beta1!r},{st.beta2!r}"
    save_checkpoint(path, tensors, meta)


_KINDS = {"classifier": Classifier, "generator": Generator, "critic": Discriminator}


def restore_models(ckpt: Checkpoint) -> dict:
    models = {}
    for key, cls in _KINDS.items():
        spec_text = ckpt.meta.get(f"spec.{key}")
        if spec_text is None:
            continue
        try:
            spec = MlpSpec.decode(spec_text)
        except ValueError as exc:
            raise CorruptManifestError(f"bad model spec for {key}: {spec_text!r}") from exc
        model = cls(spec)
        prefix = key + "."
        state = {k[len(prefix):]: v for k, v in ckpt.tensors.items()
                 if k.startswith(prefix) and ".adam." not in k}
        missing = set(model.param_names) - set(state)
        if missing:
            raise ShapeMismatchError(f"{key}: checkpoint lacks {sorted(missing)}")
        try:
            model.load_state(state)
        except ad.ShapeError as exc:
            raise ShapeMismatchError(str(exc)) from exc
        models[key] = model
    return models


def restore_optimizer(ckpt: Checkpoint, key: str, model: Mlp) -> ad.AdamState:
    b1, b2 = (float(b) for b in ckpt.meta.get(f"adam_betas.{key}", "0.9,0.999").split(","))
    st = ad.AdamState(model.params, lr=float(ckpt.meta.get(f"adam_lr.{key}", 1e-4)), beta1=b1, beta2=b2)
    st.step = int(ckpt.meta.get(f"adam_step.{key}", 0))
    for i, name in enumerate(model.param_names):
        st.m[i] = ckpt.tensors[f"{key}.adam.m.{name}"].copy()
        st.v[i] = ckpt.tensors[f"{key}.adam.v.{name}"].copy()
    return st
