"""Command-line front end.

Exit codes: 0 success, 1 input/config error, 2 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from . import anchor, baseline, codecode, respmap, simlab, tensorio
from .errors import ConfigError, InvariantViolation, VisAnchorError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _ratio(text: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not (0.0 < x <= 1.0):
        raise argparse.ArgumentTypeError(f"must lie in (0, 1], got {x}")
    return x


def _unit_interval(text: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not (0.0 <= x <= 1.0):
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {x}")
    return x


def _nonneg(text: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not (math.isfinite(x) and x >= 0):
        raise argparse.ArgumentTypeError(f"must be finite and >= 0, got {x}")
    return x


def _count(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if n < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {n}")
    return n


def _positive(text: str) -> int:
    n = _count(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def _seed(text: str) -> int:
    n = _count(text)
    if n >= 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 bits")
    return n


def _list_of(conv):
    def parse(text: str):
        items = [t for t in text.split(",") if t.strip()]
        if not items:
            raise argparse.ArgumentTypeError("empty list")
        return [conv(t.strip()) for t in items]

    return parse


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="visanchor", description="Visual-token anchoring, compression and collaborative decoding.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--min-area-ratio", type=_ratio, default=0.5, help="minimum box area ratio R (default 0.5)")
        sp.add_argument("--lambda", dest="lam", type=_nonneg, default=5.0, help="beta schedule rate (default 5)")
        sp.add_argument("--rectify", choices=respmap.RECTIFY_MODES, default="relu")
        sp.add_argument("--swap-weights", action="store_true", help="weight the global distribution by beta")
        sp.add_argument("--jobs", type=_positive, default=1)
        sp.add_argument("--out", type=Path, help="output JSON path (default: stdout)")

    sp = sub.add_parser("anchor", help="anchor every image of an instance")
    sp.add_argument("instance", type=Path)
    common(sp)

    sp = sub.add_parser("compress", help="compress an instance with one policy")
    sp.add_argument("instance", type=Path)
    sp.add_argument("--policy", choices=("anchor", "topk", "full"), default="anchor")
    sp.add_argument("--ratio", type=_ratio, default=0.5, help="top-k retention ratio")
    common(sp)

    sp = sub.add_parser("decode", help="fuse the instance's two logit streams")
    sp.add_argument("instance", type=Path)
    sp.add_argument("--beta", type=_unit_interval, help="override the collaboration coefficient")
    src = sp.add_mutually_exclusive_group()
    src.add_argument("--redundancy", type=_unit_interval, help="use this redundancy rate instead of anchoring")
    src.add_argument("--anchor-report", type=Path, help="read the redundancy rate from an anchor report")
    common(sp)

    def sim_common(sp):
        sp.add_argument("--config", type=Path, help="experiment.json (GeneratorConfig fields)")
        sp.add_argument("--seed", type=_seed)
        sp.add_argument("--instances", type=_positive)

    sp = sub.add_parser("simulate", help="run one synthetic experiment")
    sp.add_argument(
        "--kind",
        choices=("submergence", "retention", "replacement", "compare", "text-selection"),
        default="submergence",
    )
    sim_common(sp)
    sp.add_argument("--max-distractors", type=_count, default=4)
    sp.add_argument("--ratios", type=_list_of(_ratio), default=[0.2, 0.4, 0.6, 0.8])
    sp.add_argument("--max-replaced", type=_count)
    common(sp)

    sp = sub.add_parser("sweep", help="grid over R x lambda")
    sim_common(sp)
    sp.add_argument("--r-values", type=_list_of(_ratio), default=[0.1, 0.3, 0.5])
    sp.add_argument("--lambda-values", type=_list_of(_nonneg), default=[5.0])
    common(sp)
    return p


def anchor_report(bundle: tensorio.InstanceBundle, R: float, mode: str) -> dict:
    images, selections = [], []
    for i, img in enumerate(bundle.images):
        rmap = respmap.image_response_map(bundle, i, mode=mode)
        sel = anchor.select_optimal(rmap, R)
        if sel.area_ratio < R or not sel.box.contains(sel.centroid.u, sel.centroid.v):
            raise InvariantViolation(f"image {i}: selection {sel.to_dict()} breaks the box contract")
        selections.append(sel)
        images.append(
            {
                "index": i,
                "grid": [img.u, img.v],
                "response_map": rmap.summary(),
                "selection": sel.to_dict(),
            }
        )
    red = anchor.redundancy_rate(selections)
    if red.recompute() != red.r:
        raise InvariantViolation("redundancy rate is not reproducible from its areas")
    return {
        "min_area_ratio": R,
        "rectify": mode,
        "images": images,
        "redundancy": red.to_dict(),
        "redundancy_rate": red.r,
    }


def cmd_anchor(args) -> dict:
    bundle = tensorio.load_instance(args.instance)
    return anchor_report(bundle, args.min_area_ratio, args.rectify)


def cmd_compress(args) -> dict:
    bundle = tensorio.load_instance(args.instance)
    rep = anchor_report(bundle, args.min_area_ratio, args.rectify)
    if args.policy == "anchor":
        return {"policy": "anchor", **rep}
    total = sum(img.u * img.v for img in bundle.images)
    if args.policy == "full":
        return {"policy": "full", "retained_fraction": 1.0, "total_tokens": total, "anchor": rep}
    results = [
        baseline.topk_retention(respmap.image_response_map(bundle, i, mode=args.rectify), args.ratio)
        for i in range(bundle.n_images)
    ]
    kept = sum(r.kept_count for r in results)
    return {
        "policy": "topk",
        "ratio": args.ratio,
        "images": [r.to_dict() for r in results],
        "retained_tokens": kept,
        "total_tokens": total,
        "retained_fraction": kept / total,
        "anchor": rep,
    }


def _report_redundancy(path: Path) -> float:
    try:
        data = json.loads(Path(path).read_text())
        return float(data["redundancy_rate"])
    except FileNotFoundError as exc:
        raise VisAnchorError(f"anchor report not found: {path}") from exc
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise VisAnchorError(f"cannot read redundancy_rate from {path}: {exc}") from exc


def cmd_decode(args) -> dict:
    bundle = tensorio.load_instance(args.instance)
    if bundle.logits_global is None or bundle.logits_compressed is None:
        raise VisAnchorError(f"{args.instance}: instance needs both logits_global and logits_compressed")
    if args.redundancy is not None:
        r = args.redundancy
    elif args.anchor_report is not None:
        r = _report_redundancy(args.anchor_report)
    else:
        r = anchor_report(bundle, args.min_area_ratio, args.rectify)["redundancy_rate"]
    cfg = codecode.FusionConfig(lam=args.lam, beta_override=args.beta, swap_weights=args.swap_weights)
    fused = codecode.fuse_stream(bundle.logits_global, bundle.logits_compressed, cfg, r)
    return {"lambda": args.lam, "swap_weights": args.swap_weights, "beta_override": args.beta, **fused.to_dict()}


def _sim_config(args) -> simlab.GeneratorConfig:
    data = {}
    if args.config is not None:
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"experiment config not found: {args.config}") from exc
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read experiment config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("experiment config must be a JSON object")
    if args.seed is not None:
        data["seed"] = args.seed
    if args.instances is not None:
        data["instances"] = args.instances
    if "rectify" not in data:
        data["rectify"] = args.rectify
    return simlab.GeneratorConfig.from_dict(data)


def cmd_simulate(args):
    cfg = _sim_config(args)
    if args.kind == "submergence":
        return simlab.run_submergence(cfg, args.max_distractors, jobs=args.jobs)
    if args.kind == "retention":
        return simlab.run_retention_sweep(cfg, args.ratios, jobs=args.jobs)
    if args.kind == "replacement":
        n = cfg.distractor_images if args.max_replaced is None else args.max_replaced
        return simlab.run_replacement(cfg, n, jobs=args.jobs)
    if args.kind == "compare":
        return simlab.run_policy_compare(cfg, args.min_area_ratio, args.lam, args.swap_weights, jobs=args.jobs)
    return simlab.run_text_selection(cfg, args.min_area_ratio, jobs=args.jobs)


def cmd_sweep(args):
    cfg = _sim_config(args)
    rep = simlab.run_sweep(cfg, args.r_values, args.lambda_values, args.swap_weights, jobs=args.jobs)
    lines = [f"{'R':>6} {'lambda':>7} {'accuracy':>9} {'kept':>7}"]
    for row in rep.points:
        lines.append(f"{row['R']:>6g} {row['lambda']:>7g} {row['accuracy']:>9.3f} {row['compression_ratio']:>7.3f}")
    base = rep.params["baseline"]
    lines.append(f"{'full':>6} {'-':>7} {base['accuracy']:>9.3f} {1.0:>7.3f}")
    print("\n".join(lines), file=sys.stderr)
    return rep


COMMANDS = {
    "anchor": cmd_anchor,
    "compress": cmd_compress,
    "decode": cmd_decode,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        report = COMMANDS[args.command](args)
        if args.out is None:
            sys.stdout.write(tensorio.dumps_report(report))
        else:
            tensorio.write_report(report, args.out)
    except VisAnchorError as exc:
        print(f"visanchor {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (InvariantViolation, AssertionError) as exc:
        print(f"visanchor {args.command}: internal invariant violated: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"visanchor {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
