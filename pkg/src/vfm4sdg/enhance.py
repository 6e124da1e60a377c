"""Prototype- and teacher-token-guided query enhancement.

Two cross-attention blocks run in a fixed order on the initial decoder
queries: first against projected category prototypes (semantic identity),
then against projected teacher feature tokens (spatial context). Each
block is residual plus layer norm:

    Q_s = LN(Q + Attn(Q, proj(P), proj(P)))
    Q_p = LN(Q_s + Attn(Q_s, proj(Tokens), proj(Tokens)))

Keys and values share the projected matrix but still pass through
separate learned key/value maps inside the attention block.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import io as tio
from . import tensor as T
from .distill import TeacherFeature
from .errors import ConfigurationError, ContractViolation, DimensionMismatch, FormatError, VersionError
from .prototypes import PrototypeBank
from .tensor import Tensor

_MODULE = "enhance"

LN_EPS = 1e-5
PARAMS_FORMAT_VERSION = 1

STAGE_INITIAL = "initial"
STAGE_AFTER_SIGA = "after_siga"
STAGE_AFTER_CSGA = "after_csga"


@dataclass
class QuerySet:
    queries: Tensor  # N_q x C_q
    stage_tag: str = STAGE_INITIAL

    def __post_init__(self):
        if self.queries.data.ndim != 2 or self.queries.shape[0] < 1:
            raise DimensionMismatch(_MODULE, f"queries must be N_q x C_q, got {self.queries.shape}")
        if self.stage_tag not in (STAGE_INITIAL, STAGE_AFTER_SIGA, STAGE_AFTER_CSGA):
            raise ContractViolation(_MODULE, f"unknown stage tag {self.stage_tag!r}")


@dataclass
class AttentionBlockParams:
    """Query/key/value/output maps plus the block's layer-norm affine."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln_gain: Tensor
    ln_bias: Tensor


@dataclass
class EnhancerParams:
    heads: int
    proto_proj: Tensor  # C_t -> C_q
    proto_bias: Tensor
    token_proj: Tensor  # C_t -> C_q
    token_bias: Tensor
    siga: AttentionBlockParams
    csga: AttentionBlockParams

    def __post_init__(self):
        width = self.proto_proj.shape[1]
        if self.heads < 1 or width % self.heads != 0:
            raise ConfigurationError(
                _MODULE, f"query width {width} must be divisible by head count {self.heads}"
            )

    @property
    def query_width(self) -> int:
        return self.proto_proj.shape[1]

    @property
    def teacher_width(self) -> int:
        return self.proto_proj.shape[0]

    def named_tensors(self) -> dict:
        out = {
            "proto_proj": self.proto_proj,
            "proto_bias": self.proto_bias,
            "token_proj": self.token_proj,
            "token_bias": self.token_bias,
        }
        for block_name in ("siga", "csga"):
            block = getattr(self, block_name)
            for f in fields(block):
                out[f"{block_name}.{f.name}"] = getattr(block, f.name)
        return out


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _init_block(rng: np.random.Generator, width: int) -> AttentionBlockParams:
    zeros = lambda: Tensor(np.zeros(width), requires_grad=True)
    return AttentionBlockParams(
        wq=_uniform(rng, width, (width, width)),
        bq=zeros(),
        wk=_uniform(rng, width, (width, width)),
        bk=zeros(),
        wv=_uniform(rng, width, (width, width)),
        bv=zeros(),
        wo=_uniform(rng, width, (width, width)),
        bo=zeros(),
        ln_gain=Tensor(np.ones(width), requires_grad=True),
        ln_bias=Tensor(np.zeros(width), requires_grad=True),
    )


def init_enhancer_params(
    query_width: int, teacher_width: int, heads: int = 8, seed: int = 0
) -> EnhancerParams:
    """Fresh parameters: uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    return EnhancerParams(
        heads=heads,
        proto_proj=_uniform(rng, teacher_width, (teacher_width, query_width)),
        proto_bias=Tensor(np.zeros(query_width), requires_grad=True),
        token_proj=_uniform(rng, teacher_width, (teacher_width, query_width)),
        token_bias=Tensor(np.zeros(query_width), requires_grad=True),
        siga=_init_block(rng, query_width),
        csga=_init_block(rng, query_width),
    )


def cross_attention(
    q: Tensor,
    kv: Tensor,
    block: AttentionBlockParams,
    heads: int,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product cross-attention (no residual, no norm)."""
    q, kv = T.as_tensor(q), T.as_tensor(kv)
    d = q.shape[1]
    if kv.data.ndim != 2 or kv.shape[1] != d:
        raise DimensionMismatch(_MODULE, f"key/value width {kv.shape} does not match query width {d}")
    if kv.shape[0] < 1:
        raise ContractViolation(_MODULE, "cross_attention needs at least one key/value token")
    if d % heads != 0:
        raise ConfigurationError(_MODULE, f"width {d} not divisible by {heads} heads")
    head_dim = d // heads
    qp = T.add_bias(T.matmul(q, block.wq), block.bq)
    kp = T.add_bias(T.matmul(kv, block.wk), block.bk)
    vp = T.add_bias(T.matmul(kv, block.wv), block.bv)
    outputs = []
    weights = []
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qh = T.cols(qp, lo, hi)
        kh = T.cols(kp, lo, hi)
        vh = T.cols(vp, lo, hi)
        logits = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(head_dim))
        attn = T.softmax_rows(logits)
        if return_weights:
            weights.append(attn.data.copy())
        outputs.append(T.matmul(attn, vh))
    merged = T.concat_cols(outputs)
    out = T.add_bias(T.matmul(merged, block.wo), block.bo)
    if return_weights:
        return out, weights
    return out


def _guided_block(queries: Tensor, context: Tensor, block: AttentionBlockParams, heads: int) -> Tensor:
    attended = cross_attention(queries, context, block, heads)
    return T.layer_norm(T.add(queries, attended), block.ln_gain, block.ln_bias, eps=LN_EPS)


def project_prototypes(bank: PrototypeBank, params: EnhancerParams) -> Tensor:
    if bank.channels != params.teacher_width:
        raise DimensionMismatch(
            _MODULE,
            f"bank channels {bank.channels} do not match projection input {params.teacher_width}",
        )
    return T.add_bias(T.matmul(Tensor(bank.prototypes), params.proto_proj), params.proto_bias)


def project_teacher_tokens(teacher: TeacherFeature, params: EnhancerParams) -> Tensor:
    c = teacher.map.shape[0]
    if c != params.teacher_width:
        raise DimensionMismatch(
            _MODULE,
            f"teacher channels {c} do not match projection input {params.teacher_width}",
        )
    tokens = teacher.map.reshape(c, -1).T  # (H*W) x C_t, row-major spatial order
    return T.add_bias(T.matmul(Tensor(tokens), params.token_proj), params.token_bias)


def siga(q: QuerySet, bank: PrototypeBank, params: EnhancerParams) -> QuerySet:
    """Inject category prototypes into the queries (semantic identity stage)."""
    if q.stage_tag != STAGE_INITIAL:
        raise ContractViolation(_MODULE, f"siga expects initial queries, got {q.stage_tag!r}")
    enhanced = _guided_block(q.queries, project_prototypes(bank, params), params.siga, params.heads)
    return QuerySet(queries=enhanced, stage_tag=STAGE_AFTER_SIGA)


def csga(q: QuerySet, teacher: TeacherFeature, params: EnhancerParams) -> QuerySet:
    """Ground the queries in flattened teacher tokens (spatial context stage)."""
    if q.stage_tag != STAGE_AFTER_SIGA:
        raise ContractViolation(_MODULE, f"csga expects post-siga queries, got {q.stage_tag!r}")
    enhanced = _guided_block(q.queries, project_teacher_tokens(teacher, params), params.csga, params.heads)
    return QuerySet(queries=enhanced, stage_tag=STAGE_AFTER_CSGA)


def scpqe(
    q: QuerySet, bank: PrototypeBank, teacher: TeacherFeature, params: EnhancerParams
) -> QuerySet:
    """Full enhancement pipeline; the stage order is fixed by design."""
    return csga(siga(q, bank, params), teacher, params)


# ---------------------------------------------------------------------------
# parameter persistence (one tensor file per parameter + a manifest)
# ---------------------------------------------------------------------------


def save_params(params: EnhancerParams, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    listing = {}
    for name, tensor in params.named_tensors().items():
        filename = name.replace(".", "_") + ".vfmt"
        tio.write_tensor(directory / filename, tensor.data)
        listing[name] = filename
    manifest = {
        "format_version": PARAMS_FORMAT_VERSION,
        "heads": params.heads,
        "tensors": listing,
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def load_params(directory) -> EnhancerParams:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise FormatError(_MODULE, f"cannot read parameter manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(_MODULE, f"parameter manifest is not valid JSON: {exc}") from exc
    if manifest.get("format_version") != PARAMS_FORMAT_VERSION:
        raise VersionError(_MODULE, f"parameter manifest version {manifest.get('format_version')}")
    listing = manifest.get("tensors", {})

    def load(name: str) -> Tensor:
        if name not in listing:
            raise FormatError(_MODULE, f"parameter manifest missing tensor {name!r}")
        loaded = tio.read_tensor(directory / listing[name])
        return Tensor(loaded.data, requires_grad=True)

    def load_block(prefix: str) -> AttentionBlockParams:
        return AttentionBlockParams(
            **{f.name: load(f"{prefix}.{f.name}") for f in fields(AttentionBlockParams)}
        )

    return EnhancerParams(
        heads=int(manifest.get("heads", 8)),
        proto_proj=load("proto_proj"),
        proto_bias=load("proto_bias"),
        token_proj=load("token_proj"),
        token_bias=load("token_bias"),
        siga=load_block("siga"),
        csga=load_block("csga"),
    )
