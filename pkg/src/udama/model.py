"""UDAMA network: bidirectional GRU + metadata MLP encoder, regression head,
coarse (binary) and fine-grained (Gaussian) domain discriminators.

All forward functions take a :class:`~udama.numerics.Tape` and operate on a
batch. Sequences are laid out time-major inside the encoder so that every
timestep is a contiguous row block of a single matrix.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from udama.errors import ConfigError, DimensionError
from udama.numerics import Tape, Tensor

VARIANCE_FLOOR = 1e-6
GATES = ("z", "r", "h")


@dataclass
class EncoderSpec:
    """Architecture hyper-parameters.

    The embedding fed to every head is ``2 * hidden_size + mlp_sizes[-1]``
    wide: last forward state, last backward state, metadata branch.
    """

    gru_layers: int = 2
    hidden_size: int = 32
    mlp_sizes: list[int] = field(default_factory=lambda: [16])
    input_features: int = 26
    metadata_dim: int = 4
    predictor_sizes: list[int] = field(default_factory=lambda: [32])
    disc_sizes: list[int] = field(default_factory=lambda: [32, 32])

    def __post_init__(self):
        if self.gru_layers < 1 or self.hidden_size < 1:
            raise ConfigError("gru_layers and hidden_size must be >= 1")
        if not self.mlp_sizes or any(s < 1 for s in self.mlp_sizes):
            raise ConfigError("mlp_sizes must be a non-empty list of positive ints")
        if self.input_features < 1 or self.metadata_dim < 0:
            raise ConfigError("input_features must be >= 1 and metadata_dim >= 0")
        self.mlp_sizes = list(self.mlp_sizes)
        self.predictor_sizes = list(self.predictor_sizes)
        self.disc_sizes = list(self.disc_sizes)

    @property
    def embedding_dim(self) -> int:
        return 2 * self.hidden_size + self.mlp_sizes[-1]


class ModelParams:
    """Named tensors for the encoder, predictor and both discriminators.

    ``pred.shift`` and ``pred.scale`` are frozen constants mapping the raw
    regression output to ml/kg/min; training sets them from label statistics.
    """

    def __init__(self, spec: EncoderSpec, tensors: dict[str, Tensor]):
        self.spec = spec
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if t.requires_grad}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.spec,
            {
                k: Tensor(t.value.copy(), requires_grad=t.requires_grad, name=k)
                for k, t in self.tensors.items()
            },
        )

    def set_label_scale(self, mean: float, std: float) -> None:
        self.tensors["pred.shift"].value = np.array([mean], dtype=np.float64)
        self.tensors["pred.scale"].value = np.array([std], dtype=np.float64)

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of every tensor."""
        if self.tensors.keys() != other.tensors.keys():
            return False
        return all(
            np.array_equal(t.value, other.tensors[k].value) for k, t in self.tensors.items()
        )


def _mlp_shapes(prefix: str, sizes: list[int], fan_in: int) -> list[tuple[str, int, int]]:
    layers = []
    for i, width in enumerate(sizes):
        layers.append((f"{prefix}.{i}", fan_in, width))
        fan_in = width
    return layers


def init_params(spec: EncoderSpec, rng: np.random.Generator) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation."""
    tensors: dict[str, Tensor] = {}

    def uniform(name, shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        tensors[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)

    H = spec.hidden_size
    in_dim = spec.input_features
    for layer in range(spec.gru_layers):
        for direction in ("fwd", "bwd"):
            p = f"enc.gru{layer}.{direction}"
            for gate in GATES:
                uniform(f"{p}.W_{gate}", (in_dim, H), in_dim)
                uniform(f"{p}.U_{gate}", (H, H), H)
                uniform(f"{p}.b_{gate}", (H,), H)
        in_dim = 2 * H

    meta_in = max(spec.metadata_dim, 1)
    for name, fi, fo in _mlp_shapes("enc.mlp", spec.mlp_sizes, meta_in):
        uniform(f"{name}.W", (fi, fo), fi)
        uniform(f"{name}.b", (fo,), fi)

    E = spec.embedding_dim
    heads = {
        "pred": spec.predictor_sizes + [1],
        "dc": spec.disc_sizes + [2],
        "df": spec.disc_sizes + [2],
    }
    for head, sizes in heads.items():
        for name, fi, fo in _mlp_shapes(head, sizes, E):
            uniform(f"{name}.W", (fi, fo), fi)
            uniform(f"{name}.b", (fo,), fi)
    tensors["pred.shift"] = Tensor(np.zeros(1), name="pred.shift")
    tensors["pred.scale"] = Tensor(np.ones(1), name="pred.scale")
    return ModelParams(spec, tensors)


# ----------------------------------------------------------------------
# encoder


def gru_cell_forward(tape: Tape, x_t: Tensor, h_prev: Tensor, params: ModelParams, prefix: str) -> Tensor:
    """One GRU step for a batch, gate by gate.

    z = sigmoid(x W_z + h U_z + b_z), r = sigmoid(x W_r + h U_r + b_r),
    candidate = tanh(x W_h + (r * h) U_h + b_h),
    h_next = (1 - z) * h + z * candidate.
    """
    p = params.tensors
    if x_t.shape[1] != p[f"{prefix}.W_z"].shape[0] or h_prev.shape[1] != p[f"{prefix}.U_z"].shape[0]:
        raise DimensionError(
            f"gru cell {prefix}: x{x_t.shape}, h{h_prev.shape} vs W{p[prefix + '.W_z'].shape}"
        )
    z = tape.sigmoid(tape.add(tape.affine(x_t, p[f"{prefix}.W_z"], p[f"{prefix}.b_z"]),
                              tape.affine(h_prev, p[f"{prefix}.U_z"])))
    r = tape.sigmoid(tape.add(tape.affine(x_t, p[f"{prefix}.W_r"], p[f"{prefix}.b_r"]),
                              tape.affine(h_prev, p[f"{prefix}.U_r"])))
    cand = tape.tanh(tape.add(tape.affine(x_t, p[f"{prefix}.W_h"], p[f"{prefix}.b_h"]),
                              tape.affine(tape.mul(r, h_prev), p[f"{prefix}.U_h"])))
    # (1 - z) * h + z * cand == h + z * (cand - h)
    return tape.add(h_prev, tape.mul(z, tape.sub(cand, h_prev)))


def _gru_direction(tape, xs, T, B, params, prefix, reverse, keep_all):
    """Run one direction over time-major rows ``xs`` of shape (T*B, in).

    Same arithmetic as :func:`gru_cell_forward`, with the input projections
    of all timesteps computed in one affine and the z/r gates fused.
    """
    p = params.tensors
    H = p[f"{prefix}.U_z"].shape[0]
    W_zr = tape.concat([p[f"{prefix}.W_z"], p[f"{prefix}.W_r"]], axis=1)
    b_zr = tape.concat([p[f"{prefix}.b_z"], p[f"{prefix}.b_r"]], axis=0)
    U_zr = tape.concat([p[f"{prefix}.U_z"], p[f"{prefix}.U_r"]], axis=1)
    U_h = p[f"{prefix}.U_h"]
    proj_zr = tape.affine(xs, W_zr, b_zr)
    proj_h = tape.affine(xs, p[f"{prefix}.W_h"], p[f"{prefix}.b_h"])

    h = Tensor(np.zeros((B, H)))
    states = [None] * T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        lo, hi = t * B, (t + 1) * B
        zr = tape.sigmoid(tape.add(tape.slice(proj_zr, lo, hi), tape.affine(h, U_zr)))
        z = tape.slice(zr, 0, H, axis=1)
        r = tape.slice(zr, H, 2 * H, axis=1)
        cand = tape.tanh(tape.add(tape.slice(proj_h, lo, hi), tape.affine(tape.mul(r, h), U_h)))
        h = tape.add(h, tape.mul(z, tape.sub(cand, h)))
        if keep_all:
            states[t] = h
    return states, h


def _mlp(tape, x, params, prefix, n_layers, final_activation):
    for i in range(n_layers):
        x = tape.affine(x, params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"])
        if i < n_layers - 1 or final_activation:
            x = tape.tanh(x)
    return x


def encode_batch(tape: Tape, params: ModelParams, X: np.ndarray, metadata: np.ndarray) -> Tensor:
    """Embed a batch: ``X`` is (B, T, F), ``metadata`` is (B, M). Returns (B, E)."""
    spec = params.spec
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != spec.input_features:
        raise DimensionError(
            f"encode: X{X.shape} does not match input_features={spec.input_features}"
        )
    B, T, F = X.shape
    metadata = np.asarray(metadata, dtype=np.float64).reshape(B, -1)
    if metadata.shape[1] != spec.metadata_dim:
        raise DimensionError(f"encode: metadata{metadata.shape} vs metadata_dim={spec.metadata_dim}")
    if spec.metadata_dim == 0:
        metadata = np.zeros((B, 1))

    xs = Tensor(X.transpose(1, 0, 2).reshape(T * B, F))
    for layer in range(spec.gru_layers):
        top = layer == spec.gru_layers - 1
        fwd_states, h_fwd = _gru_direction(tape, xs, T, B, params, f"enc.gru{layer}.fwd", False, not top)
        bwd_states, h_bwd = _gru_direction(tape, xs, T, B, params, f"enc.gru{layer}.bwd", True, not top)
        if not top:
            xs = tape.concat(
                [tape.concat(fwd_states, axis=0), tape.concat(bwd_states, axis=0)], axis=1
            )
    meta = _mlp(tape, Tensor(metadata), params, "enc.mlp", len(spec.mlp_sizes), True)
    return tape.concat([h_fwd, h_bwd, meta], axis=1)


def encode(window, params: ModelParams) -> np.ndarray:
    """Embedding vector of a single :class:`~udama.datasynth.SensorWindow`."""
    emb = encode_batch(Tape(record=False), params, window.X[None], np.asarray(window.metadata)[None])
    return emb.value[0]


# ----------------------------------------------------------------------
# heads


def _check_embedding(emb: Tensor, params: ModelParams) -> None:
    if emb.value.ndim != 2 or emb.shape[1] != params.spec.embedding_dim:
        raise DimensionError(
            f"embedding{emb.shape} does not match embedding_dim={params.spec.embedding_dim}"
        )


def predict_head(tape: Tape, emb: Tensor, params: ModelParams) -> Tensor:
    """VO2max prediction (ml/kg/min) as a (B, 1) tensor."""
    _check_embedding(emb, params)
    raw = _mlp(tape, emb, params, "pred", len(params.spec.predictor_sizes) + 1, False)
    return tape.add(tape.mul(raw, params["pred.scale"]), params["pred.shift"])


def coarse_head(tape: Tape, emb: Tensor, params: ModelParams) -> Tensor:
    """Two raw logits per sample; class 0 is source, class 1 is target."""
    _check_embedding(emb, params)
    return _mlp(tape, emb, params, "dc", len(params.spec.disc_sizes) + 1, False)


def fine_head(tape: Tape, emb: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Gaussian over the fine-grained domain label: (mu, sigma2), each (B, 1)."""
    _check_embedding(emb, params)
    out = _mlp(tape, emb, params, "df", len(params.spec.disc_sizes) + 1, False)
    mu = tape.slice(out, 0, 1, axis=1)
    sigma2 = tape.add(tape.softplus(tape.slice(out, 1, 2, axis=1)), Tensor(VARIANCE_FLOOR))
    return mu, sigma2


def gradient_reversal(tape: Tape, emb: Tensor, lambda_grl: float) -> Tensor:
    if lambda_grl < 0:
        raise ConfigError(f"lambda_grl must be >= 0, got {lambda_grl}")
    return tape.reverse_gradient(emb, lambda_grl)


def _as_batch(embedding) -> Tensor:
    arr = np.asarray(embedding, dtype=np.float64)
    return Tensor(arr.reshape(1, -1) if arr.ndim == 1 else arr)


def predict_vo2max(embedding, params: ModelParams) -> float:
    return float(predict_head(Tape(record=False), _as_batch(embedding), params).value[0, 0])


def discriminate_coarse(embedding, params: ModelParams) -> np.ndarray:
    return coarse_head(Tape(record=False), _as_batch(embedding), params).value[0]


def discriminate_fine(embedding, params: ModelParams) -> tuple[float, float]:
    mu, s2 = fine_head(Tape(record=False), _as_batch(embedding), params)
    return float(mu.value[0, 0]), float(s2.value[0, 0])


def predict_batch(params: ModelParams, X: np.ndarray, metadata: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference over many samples; returns a flat array of predictions."""
    out = []
    for lo in range(0, len(X), batch_size):
        tape = Tape(record=False)
        emb = encode_batch(tape, params, X[lo:lo + batch_size], metadata[lo:lo + batch_size])
        out.append(predict_head(tape, emb, params).value[:, 0])
    return np.concatenate(out) if out else np.zeros(0)


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    doc = {
        "spec": asdict(params.spec),
        "tensors": [
            {
                "name": name,
                "shape": list(t.shape),
                "trainable": t.requires_grad,
                "values": t.value.reshape(-1).tolist(),
            }
            for name, t in params.tensors.items()
        ],
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> ModelParams:
    doc = json.loads(Path(path).read_text())
    spec = EncoderSpec(**doc["spec"])
    tensors = {}
    for entry in doc["tensors"]:
        value = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        tensors[entry["name"]] = Tensor(value, requires_grad=entry.get("trainable", True), name=entry["name"])
    return ModelParams(spec, tensors)
