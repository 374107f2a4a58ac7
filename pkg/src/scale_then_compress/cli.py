"""
Command-line entry point for the scale-then-compress toolkit.

Exit codes: 0 ok, 1 domain error, 2 configuration error, 3 I/O or format error.
Machine-readable output goes to stdout (or --output); diagnostics to stderr.
"""

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .compress import TokenGrid, count_tokens, stc_reshape
from .config import PipelineConfig, QuantSpec, load_pipeline_config, reload_settings, settings
from .cost_model import CSV_FIELDS, combined_cost, compare_reports, video_budget
from .errors import ConfigError, FormatError, InvalidArgumentError, ScaleCompressError
from .formats import read_image, read_nvt1, write_nvi1, write_nvt1
from .packing import pack, read_samples
from .pipeline import ScaleThenCompressPipeline
from .pruning import prune_cluster, prune_deltaloss, prune_random, read_records
from .quantization import quant_error_report, quantize, write_quantized

logger = logging.getLogger(__name__)

STOCHASTIC_PRUNE_METHODS = ("random", "cluster")


def _dumps(payload: Any) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _emit(text: str, output: Optional[str]) -> None:
    """Write text to --output when given, stdout otherwise"""
    if output:
        Path(output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _require_output(args: argparse.Namespace) -> str:
    if not args.output:
        raise InvalidArgumentError(f"{args.command} writes a binary file and needs --output")
    return args.output


def cmd_tile_plan(args: argparse.Namespace, config: PipelineConfig) -> int:
    if args.image:
        img = read_image(args.image)
        height, width = img.height, img.width
    elif args.height is not None and args.width is not None:
        height, width = args.height, args.width
    else:
        raise InvalidArgumentError("tile-plan needs --height and --width, or --image")

    pipeline = ScaleThenCompressPipeline(config)
    plan = pipeline.plan(height, width)
    k = config.stc_block if args.k is None else args.k
    result = plan.to_dict()
    result["token_count"] = count_tokens(plan, k).to_dict()
    result["stc_block"] = k
    _emit(_dumps(result), args.output)
    return 0


def cmd_encode(args: argparse.Namespace, config: PipelineConfig) -> int:
    output = _require_output(args)
    img = read_image(args.image)
    pipeline = ScaleThenCompressPipeline(config)
    encoded = pipeline.encode_image(img, k=args.k)

    tensor = encoded.tokens.data if args.compressed else encoded.features.data
    write_nvt1(output, tensor)
    summary = encoded.summary()
    summary["output"] = "compressed-tokens" if args.compressed else "multiscale-features"
    sys.stdout.write(_dumps(summary))
    return 0


def cmd_compress(args: argparse.Namespace, config: PipelineConfig) -> int:
    output = _require_output(args)
    array = read_nvt1(args.input)
    pipeline = ScaleThenCompressPipeline(config)

    if array.ndim == 3:
        if args.sample_frames is not None or args.pool_ratio is not None:
            raise InvalidArgumentError("--sample-frames and --pool-ratio need a rank-4 (frames) input")
        k = config.stc_block if args.k is None else args.k
        grid = stc_reshape(TokenGrid(array), k)
        write_nvt1(output, grid.data)
        sidecar = grid.metadata()
    elif array.ndim == 4:
        # Video frames are only pooled in time unless --k asks for spatial STC
        k = 1 if args.k is None else args.k
        video = pipeline.compress_video(array, sample_frames=args.sample_frames, pool_ratio=args.pool_ratio, k=k)
        write_nvt1(output, video.data)
        sidecar = video.metadata()
    else:
        raise FormatError(f"compress expects a rank-3 or rank-4 NVT1 tensor, got rank {array.ndim}")

    sidecar["num_tokens"] = sidecar["rows"] * sidecar["cols"] * sidecar["frames"]
    text = _dumps(sidecar)
    Path(output + ".json").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def _read_ratio_file(path: str) -> Dict[str, float]:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise FormatError(f"Cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise FormatError(f"{path} must hold a JSON object of subset -> ratio")
    return {str(subset): _to_ratio(str(ratio)) for subset, ratio in raw.items()}


def _parse_ratios(values: Sequence[str], ratio_file: Optional[str] = None) -> Any:
    if ratio_file:
        if values:
            raise InvalidArgumentError("Use either --ratio or --ratio-per-subset, not both")
        return _read_ratio_file(ratio_file)
    if not values:
        raise InvalidArgumentError("prune needs --ratio or --ratio-per-subset")
    if len(values) == 1 and "=" not in values[0]:
        return _to_ratio(values[0])
    ratios = {}
    for value in values:
        subset, separator, ratio = value.partition("=")
        if not separator or not subset:
            raise InvalidArgumentError(f"Per-subset ratio must look like name=0.3, got {value!r}")
        ratios[subset] = _to_ratio(ratio)
    return ratios


def _to_ratio(text: str) -> float:
    try:
        return float(text)
    except ValueError as e:
        raise InvalidArgumentError(f"Keep ratio must be a number, got {text!r}") from e


def cmd_prune(args: argparse.Namespace, config: PipelineConfig) -> int:
    if args.method in STOCHASTIC_PRUNE_METHODS and args.seed is None:
        raise InvalidArgumentError(f"prune --method {args.method} is stochastic and needs an explicit --seed")

    records = read_records(args.records)
    ratios = _parse_ratios(args.ratio, args.ratio_per_subset)
    pruning = config.pruning
    if args.method == "deltaloss":
        manifest = prune_deltaloss(
            records, ratios,
            aggregation=args.aggregation or pruning.aggregation,
            delta_tolerance=pruning.delta_tolerance,
        )
    elif args.method == "cluster":
        manifest = prune_cluster(
            records,
            pruning.k_clusters if args.k_clusters is None else args.k_clusters,
            ratios,
            args.seed,
            max_iterations=pruning.max_iterations,
            tolerance=pruning.tolerance,
            n_init=pruning.n_init,
        )
    else:
        manifest = prune_random(records, ratios, args.seed)

    if args.output:
        Path(args.output).write_text(manifest.to_jsonl(), encoding="utf-8")
        sys.stdout.write(_dumps(manifest.summary()))
    else:
        # Kept records first, summary object last, one JSON value per line
        sys.stdout.write(manifest.to_jsonl())
        sys.stdout.write(json.dumps(manifest.summary(), sort_keys=True) + "\n")
    return 0


def cmd_pack(args: argparse.Namespace, config: PipelineConfig) -> int:
    packing = config.packing
    capacity = packing.capacity if args.capacity is None else args.capacity
    policy = args.policy or packing.policy
    max_open = packing.max_open_contexts if args.max_open_contexts is None else args.max_open_contexts

    samples = read_samples(args.samples)
    errors: List = []
    batch = pack(samples, capacity, policy, max_open_contexts=max_open, errors=errors)

    table = batch.to_dict()
    table["policy"] = policy
    table["errors"] = [
        {"id": error.sample_id, "length": error.length, "capacity": error.capacity} for error in errors
    ]
    if args.output:
        write_nvi1(args.output + ".nvi", batch.payload())
    _emit(_dumps(table), args.output)
    for error in errors:
        print(f"error: {error}", file=sys.stderr)
    return 1 if errors else 0


def _quant_spec(args: argparse.Namespace, config: PipelineConfig) -> QuantSpec:
    if args.format is None:
        return config.quant
    granularity = args.granularity or ("per-group" if args.format == "int4-group" else "per-channel")
    return QuantSpec(
        format=args.format,
        granularity=granularity,
        group_size=args.group_size,
        fp8_scaling=args.fp8_scaling,
    )


def cmd_quant(args: argparse.Namespace, config: PipelineConfig) -> int:
    spec = _quant_spec(args, config)
    array = read_nvt1(args.input)
    if args.output:
        write_quantized(args.output, quantize(array, spec))
    report = quant_error_report(array, spec)
    sys.stdout.write(_dumps(report.model_dump()))
    return 0


_COST_QUANT = {
    "fp16": None,
    "w8a8": QuantSpec.w8a8(),
    "w4a16": QuantSpec.w4a16(),
}


def cmd_cost(args: argparse.Namespace, config: PipelineConfig) -> int:
    if not args.tokens:
        raise InvalidArgumentError("cost needs at least one --tokens")
    shape = config.model
    spec = _COST_QUANT[args.quant] if args.quant else config.quant

    reports = [
        combined_cost(tokens, shape, spec, args.context, args.tiles, label=f"tokens={tokens}")
        for tokens in args.tokens
    ]
    comparisons = [compare_reports(reports[0], report) for report in reports[1:]]

    if args.format == "csv":
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for report in reports:
            writer.writerow(report.to_csv_row())
        _emit(buffer.getvalue(), args.output)
        for comparison in comparisons:
            print(
                f"{comparison['baseline']} vs {comparison['candidate']}: "
                f"attention-FLOP ratio {comparison['attention_flop_ratio']:.2f} ({comparison['label']})",
                file=sys.stderr,
            )
        return 0

    result: Dict[str, Any] = {
        "reports": [report.to_dict() for report in reports],
        "comparisons": comparisons,
    }
    if args.video_frames is not None:
        side = args.grid_side or math.ceil(config.s2.feature_side / config.stc_block)
        pool = args.pool_ratio or config.temporal_pool_ratio
        result["video_budget"] = {
            "frames": args.video_frames,
            "pool_ratio": pool,
            "grid_side": side,
            "tokens": video_budget(args.video_frames, pool, side),
        }
    _emit(_dumps(result), args.output)
    return 0


COMMANDS = {
    "tile-plan": cmd_tile_plan,
    "encode": cmd_encode,
    "compress": cmd_compress,
    "prune": cmd_prune,
    "pack": cmd_pack,
    "quant": cmd_quant,
    "cost": cmd_cost,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stc", description="Scale-then-compress visual token toolkit")
    parser.add_argument("--config", help="Pipeline configuration JSON file")
    parser.add_argument("--seed", type=int, help="Seed for stochastic commands (required by them)")
    parser.add_argument("--output", help="Output path (stdout when omitted, where possible)")
    sub = parser.add_subparsers(dest="command", required=True)

    plan = sub.add_parser("tile-plan", help="Print the Dynamic-S2 tile plan for an image size")
    plan.add_argument("--height", type=int)
    plan.add_argument("--width", type=int)
    plan.add_argument("--image", help="Take the size from a PPM or NVT1 image")
    plan.add_argument("--k", type=int, help="STC block used for the token count")

    encode = sub.add_parser("encode", help="Encode an image into multi-scale features")
    encode.add_argument("image", help="P6 PPM or NVT1 image")
    encode.add_argument("--k", type=int, help="STC block side")
    encode.add_argument("--compressed", action="store_true", help="Write STC-compressed tokens instead of features")

    compress = sub.add_parser("compress", help="STC-reshape a token grid or pool a frame stack")
    compress.add_argument("input", help="Rank-3 (rows, cols, ch) or rank-4 (frames, rows, cols, ch) NVT1")
    compress.add_argument("--k", type=int, help="STC block side (grids default to the configured block, videos to 1)")
    compress.add_argument("--pool-ratio", type=int, help="Frames averaged per group")
    compress.add_argument("--sample-frames", type=int, help="Uniformly sample this many frames first")

    prune = sub.add_parser("prune", help="Prune a dataset of scored records")
    prune.add_argument("records", help="JSON-lines sample records")
    prune.add_argument("--method", choices=("deltaloss", "cluster", "random"), default="deltaloss")
    prune.add_argument("--ratio", action="append", default=[], help="Keep ratio, or subset=ratio (repeatable)")
    prune.add_argument("--ratio-per-subset", help="JSON file mapping subset -> keep ratio")
    prune.add_argument("--aggregation", choices=("mean", "sum"))
    prune.add_argument("--k-clusters", type=int)

    pack_parser = sub.add_parser("pack", help="Pack token sequences into fixed-capacity contexts")
    pack_parser.add_argument("samples", help="JSON-lines samples with payload or length")
    pack_parser.add_argument("--capacity", type=int)
    pack_parser.add_argument("--policy", help="first-fit or ffd:W")
    pack_parser.add_argument("--max-open-contexts", type=int)

    quant = sub.add_parser("quant", help="Quantize an NVT1 tensor and report the error")
    quant.add_argument("input", help="NVT1 tensor")
    quant.add_argument("--format", choices=("int8-symmetric", "int4-group", "fp8-e4m3"))
    quant.add_argument("--granularity", choices=("per-tensor", "per-channel", "per-group"))
    quant.add_argument("--group-size", type=int)
    quant.add_argument("--fp8-scaling", choices=("none", "amax"), default="none")

    cost = sub.add_parser("cost", help="Analytic prefill/decode cost for visual token counts")
    cost.add_argument("--tokens", type=int, action="append", default=[], help="Visual tokens (repeatable)")
    cost.add_argument("--tiles", type=int, default=0, help="Encoder tiles behind the tokens")
    cost.add_argument("--quant", choices=tuple(_COST_QUANT), help="Weight format for decode (config default)")
    cost.add_argument("--context", type=int, help="Decode context length (defaults to the token count)")
    cost.add_argument("--format", choices=("json", "csv"), default="json")
    cost.add_argument("--video-frames", type=int, help="Also report the video token budget")
    cost.add_argument("--pool-ratio", type=int)
    cost.add_argument("--grid-side", type=int)

    return parser


def _configure_logging() -> None:
    logging.basicConfig(
        level=getattr(logging, settings.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; returns the process exit code"""
    args = build_parser().parse_args(argv)
    try:
        reload_settings()
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return e.exit_code
    _configure_logging()

    try:
        config = load_pipeline_config(args.config)
        return COMMANDS[args.command](args, config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return e.exit_code
    except ScaleCompressError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        # pydantic ValidationError from CLI-built specs
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return FormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
