"""
Analytic cost model for prefill and decode.

Counts are predictions from closed-form formulas, not measurements:

  - a multiply-accumulate is 2 FLOPs;
  - prefill attention per layer is QK^T plus AV over the full n x n score
    matrix, 2*n^2*h each, so 4 * layers * n^2 * hidden in total;
  - linear FLOPs are 2 * tokens * weights over q/k/v/o and the gated MLP
    (gate, up, down), plus the LM head for the final position;
  - the vision encoder uses the same transformer formula with a two-matrix MLP,
    once per encoder tile;
  - weights are (out, in) matrices; quantization groups run along `in`, each
    group, row or matrix carries one f32 scale; the embedding table is not
    read per decoded token and is excluded;
  - the KV cache holds fp16 keys and values for every layer and position.

W4A16 kernels accumulate in FP16; that affects kernel speed only and is not
modeled numerically.
"""

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Dict, List, Optional, Sequence

from pydantic import BaseModel

from .compress import count_tokens
from .config import EncoderShape, ModelShape, QuantSpec
from .errors import InvalidArgumentError
from .tiling import TilePlan

FLOPS_PER_MAC = 2
ATTENTION_FLOPS_PER_LAYER_TOKEN2_HIDDEN = 4
FP16_BITS = 16
SCALE_BITS = 32
PREDICTION_LABEL = "analytic model prediction (not a measured speedup)"

CSV_FIELDS = (
    "label",
    "visual_tokens",
    "encoder_tiles",
    "prefill_attention_flops",
    "prefill_linear_flops",
    "encoder_flops",
    "prefill_total_flops",
    "encoder_share",
    "quant",
    "context",
    "decode_flops_per_token",
    "weight_payload_bytes",
    "weight_scale_bytes",
    "weight_bytes_per_token",
    "kv_cache_bytes",
)


@dataclass(frozen=True)
class WeightMatrix:
    """`count` identical (rows=out, cols=in) matrices"""

    name: str
    rows: int
    cols: int
    count: int

    @property
    def weights(self) -> int:
        return self.rows * self.cols * self.count


def weight_matrices(shape: ModelShape) -> List[WeightMatrix]:
    """Every matrix read once per decoded token"""
    h, ffn, layers = shape.hidden, shape.intermediate, shape.layers
    return [
        WeightMatrix("q_proj", h, h, layers),
        WeightMatrix("k_proj", h, h, layers),
        WeightMatrix("v_proj", h, h, layers),
        WeightMatrix("o_proj", h, h, layers),
        WeightMatrix("gate_proj", ffn, h, layers),
        WeightMatrix("up_proj", ffn, h, layers),
        WeightMatrix("down_proj", h, ffn, layers),
        WeightMatrix("lm_head", shape.vocab, h, 1),
    ]


def attention_flops(tokens: int, layers: int, hidden: int) -> int:
    return ATTENTION_FLOPS_PER_LAYER_TOKEN2_HIDDEN * layers * tokens * tokens * hidden


def linear_flops(tokens: int, shape: ModelShape) -> int:
    per_layer = 4 * shape.hidden * shape.hidden + 3 * shape.hidden * shape.intermediate
    lm_head = shape.vocab * shape.hidden
    return FLOPS_PER_MAC * (tokens * shape.layers * per_layer + lm_head)


def encoder_flops_per_tile(encoder: EncoderShape) -> int:
    """One encoder pass over a tile's patch tokens"""
    t, h = encoder.tokens_per_tile, encoder.hidden
    linear = FLOPS_PER_MAC * t * encoder.layers * (4 * h * h + 2 * h * encoder.intermediate)
    return attention_flops(t, encoder.layers, h) + linear


def matrix_bytes(matrix: WeightMatrix, spec: Optional[QuantSpec]) -> Dict[str, Fraction]:
    """Payload and scale bytes of one matrix entry (all `count` copies); None means fp16"""
    if spec is None:
        return {"payload": Fraction(matrix.weights * FP16_BITS, 8), "scales": Fraction(0)}
    payload = Fraction(matrix.weights * spec.bits, 8)
    if spec.granularity == "per-group":
        scales = matrix.rows * math.ceil(matrix.cols / spec.group_size)
    elif spec.granularity == "per-channel":
        scales = matrix.rows
    else:
        scales = 1
    return {"payload": payload, "scales": Fraction(scales * matrix.count * SCALE_BITS, 8)}


def _number(value: Fraction) -> Any:
    return int(value) if value.denominator == 1 else float(value)


class CostReport(BaseModel):
    """Token, FLOP and byte accounting; unset stages stay zero"""

    label: str = ""
    visual_tokens: int = 0
    encoder_tiles: int = 0
    prefill_attention_flops: int = 0
    prefill_linear_flops: int = 0
    encoder_flops: int = 0
    prefill_total_flops: int = 0
    encoder_share: float = 0.0
    quant: str = ""
    context: int = 0
    decode_flops_per_token: int = 0
    weight_payload_bytes: float = 0
    weight_scale_bytes: float = 0
    weight_bytes_per_token: float = 0
    kv_cache_bytes: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "constants": {
                "flops_per_mac": FLOPS_PER_MAC,
                "attention_flops_per_layer_token2_hidden": ATTENTION_FLOPS_PER_LAYER_TOKEN2_HIDDEN,
                "scale_bits": SCALE_BITS,
            },
            "note": PREDICTION_LABEL,
            **self.model_dump(),
        }

    def to_csv_row(self) -> List[Any]:
        values = self.model_dump()
        return [values[name] for name in CSV_FIELDS]


def _prefill_fields(tokens: int, shape: ModelShape, tiles: int) -> Dict[str, Any]:
    if tokens < 1:
        raise InvalidArgumentError(f"Prefill needs at least one token, got {tokens}")
    if tiles < 0:
        raise InvalidArgumentError(f"Encoder tile count must be non-negative, got {tiles}")
    attention = attention_flops(tokens, shape.layers, shape.hidden)
    linear = linear_flops(tokens, shape)
    encoder = tiles * encoder_flops_per_tile(shape.encoder)
    total = attention + linear + encoder
    return {
        "visual_tokens": tokens,
        "encoder_tiles": tiles,
        "prefill_attention_flops": attention,
        "prefill_linear_flops": linear,
        "encoder_flops": encoder,
        "prefill_total_flops": total,
        "encoder_share": encoder / total,
    }


def _decode_fields(shape: ModelShape, spec: Optional[QuantSpec], context: int) -> Dict[str, Any]:
    if context < 0:
        raise InvalidArgumentError(f"Decode context must be non-negative, got {context}")
    matrices = weight_matrices(shape)
    payload = sum((matrix_bytes(m, spec)["payload"] for m in matrices), Fraction(0))
    scales = sum((matrix_bytes(m, spec)["scales"] for m in matrices), Fraction(0))
    weights = sum(m.weights for m in matrices)
    return {
        "quant": "fp16" if spec is None else _spec_label(spec),
        "context": context,
        "decode_flops_per_token": FLOPS_PER_MAC * weights + attention_flops(1, shape.layers, shape.hidden) * context,
        "weight_payload_bytes": _number(payload),
        "weight_scale_bytes": _number(scales),
        "weight_bytes_per_token": _number(payload + scales),
        "kv_cache_bytes": 2 * shape.layers * context * shape.hidden * FP16_BITS // 8,
    }


def _spec_label(spec: QuantSpec) -> str:
    if spec.granularity == "per-group":
        return f"{spec.format}/g{spec.group_size}"
    return f"{spec.format}/{spec.granularity}"


def prefill_cost(tokens: int, shape: ModelShape, tiles: int = 0, label: str = "") -> CostReport:
    """
    Prefill cost of `tokens` visual tokens.

    Attention is exactly quadratic in tokens (4 * layers * tokens^2 * hidden);
    linear FLOPs are linear in tokens. `tiles` encoder passes add encoder FLOPs.

    Args:
        tokens: Visual tokens entering the LLM
        shape: Model shape
        tiles: Encoder tiles processed for these tokens
        label: Row label for sweeps

    Returns:
        CostReport: prefill fields set, decode fields zero
    """
    return CostReport(label=label, **_prefill_fields(tokens, shape, tiles))


def decode_cost(shape: ModelShape, spec: Optional[QuantSpec], context: int, label: str = "") -> CostReport:
    """
    Per-token decode cost: weight bytes moved under `spec` (None for fp16),
    KV-cache bytes for `context` positions and FLOPs per token.
    """
    return CostReport(label=label, **_decode_fields(shape, spec, context))


def combined_cost(tokens: int, shape: ModelShape, spec: Optional[QuantSpec] = None,
                  context: Optional[int] = None, tiles: int = 0, label: str = "") -> CostReport:
    """Prefill and decode in one report; the decode context defaults to the prefill tokens"""
    context = tokens if context is None else context
    return CostReport(label=label, **_prefill_fields(tokens, shape, tiles), **_decode_fields(shape, spec, context))


def pipeline_cost(plan: TilePlan, k: int, shape: ModelShape, spec: Optional[QuantSpec] = None,
                  context: Optional[int] = None, label: str = "") -> CostReport:
    """Prefill and decode cost for a tile plan compressed with STC block k"""
    counts = count_tokens(plan, k)
    return combined_cost(counts.total_tokens, shape, spec, context, counts.encoder_tiles, label)


def video_budget(frames: int, pool_ratio: int, grid_side: int) -> int:
    """grid_side^2 x ceil(frames / pool_ratio) tokens per video"""
    if frames < 1 or pool_ratio < 1 or grid_side < 1:
        raise InvalidArgumentError(
            f"video_budget needs positive arguments, got frames={frames} pool_ratio={pool_ratio} grid_side={grid_side}"
        )
    return grid_side * grid_side * math.ceil(frames / pool_ratio)


def _ratio(numerator: float, denominator: float) -> Optional[float]:
    return numerator / denominator if denominator else None


def compare_reports(a: CostReport, b: CostReport) -> Dict[str, Any]:
    """Ratios a / b of the main cost figures, labelled as model predictions"""
    return {
        "label": PREDICTION_LABEL,
        "baseline": a.label,
        "candidate": b.label,
        "token_ratio": _ratio(a.visual_tokens, b.visual_tokens),
        "attention_flop_ratio": _ratio(a.prefill_attention_flops, b.prefill_attention_flops),
        "linear_flop_ratio": _ratio(a.prefill_linear_flops, b.prefill_linear_flops),
        "prefill_flop_ratio": _ratio(a.prefill_total_flops, b.prefill_total_flops),
        "weight_byte_ratio": _ratio(a.weight_bytes_per_token, b.weight_bytes_per_token),
    }


def sweep_tokens(token_counts: Sequence[int], shape: ModelShape, tiles: int = 0) -> List[CostReport]:
    """One prefill report per token count, labelled by the count"""
    return [prefill_cost(tokens, shape, tiles, label=f"tokens={tokens}") for tokens in token_counts]
