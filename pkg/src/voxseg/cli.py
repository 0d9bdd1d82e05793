"""Command-line entry points: synthesize a dataset, train, run inference
(optionally ensembling several checkpoints), evaluate predictions, and
export overlay slice images.

Every command honors --seed and --threads at the top level; --threads 1
pins the BLAS pool so equal-seed runs are bitwise reproducible.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .checkpoint import load_checkpoint
from .errors import ConfigError, DataError, VoxsegError
from .inference import predict_case
from .metrics import CLASS_NAMES, evaluate_case
from .native_io import read_case, read_index, read_native, write_case, write_index, write_native
from .nifti import read_brats_case, read_nifti, write_nifti
from .rngstream import ROLE_SYNTH, derive_rng
from .slices import export_slice
from .synth import synth_case
from .trainer import train, train_config_from_dict
from .volume import Case, Volume


def _parse_size(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ConfigError(f"size must look like 48x48x48, got {text!r}")
    try:
        extents = tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"size must be three integers, got {text!r}") from None
    return extents


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extents = _parse_size(args.size)
    ids = []
    for i in range(args.cases):
        case_id = f"case_{i:03d}"
        case = synth_case(
            extents,
            derive_rng(args.seed, ROLE_SYNTH, i),
            difficulty=args.difficulty,
            case_id=case_id,
        )
        write_case(case, out / case_id)
        ids.append(case_id)
    write_index(out, ids)
    print(f"wrote {len(ids)} cases to {out}")
    return 0


def cmd_train(args) -> int:
    try:
        raw = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{args.config}: not valid JSON ({e})") from None
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = train_config_from_dict(raw)
    result = train(cfg, resume=args.resume, echo=print)
    print(f"done: {result.final_checkpoint}")
    return 0


def _load_input_cases(path: Path) -> list[Case]:
    """A case dir, a dataset dir, or a BraTS-layout dir of case dirs."""
    if not path.exists():
        raise DataError(f"{path}: no such input")
    if (path / "index.json").exists():
        return [read_case(path / cid) for cid in read_index(path)]
    if (path / "case.json").exists():
        return [read_case(path)]
    if list(path.glob("*_t1.nii*")):
        return [read_brats_case(path)]
    subdirs = sorted(p for p in path.iterdir() if p.is_dir())
    cases = [read_brats_case(p) for p in subdirs if list(p.glob("*_t1.nii*"))]
    if not cases:
        raise DataError(f"{path}: found neither a native case/dataset nor BraTS-layout images")
    return cases


def cmd_infer(args) -> int:
    models = []
    for ckpt_path in args.checkpoint:
        ckpt = load_checkpoint(ckpt_path)
        models.append(ckpt.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for case in _load_input_cases(Path(args.input)):
        labels = predict_case(case, models, threshold=args.threshold)
        if args.format == "native":
            write_native(labels, out / f"{case.id}.json")
        else:
            write_nifti(labels, out / f"{case.id}.nii.gz")
        print(f"predicted {case.id}")
    return 0


def _load_label_maps(path: Path) -> dict[str, Volume]:
    """Label volumes keyed by case id: a native dataset dir (labels come
    from the cases) or a flat dir of per-case label files."""
    if not path.exists():
        raise DataError(f"{path}: no such directory")
    if (path / "index.json").exists():
        out = {}
        for cid in read_index(path):
            case = read_case(path / cid)
            if case.label is None:
                raise DataError(f"case {cid!r} has no label volume")
            out[cid] = case.label
        return out
    out = {}
    for p in sorted(path.glob("*.json")):
        out[p.stem] = read_native(p)
    for p in sorted(list(path.glob("*.nii")) + list(path.glob("*.nii.gz"))):
        cid = p.name[: -len(".nii.gz")] if p.name.endswith(".nii.gz") else p.stem
        out[cid] = read_nifti(p, kind="label_map")
    if not out:
        raise DataError(f"{path}: no label volumes found")
    for cid, vol in out.items():
        if vol.kind != "label_map":
            raise DataError(f"{cid}: expected a label_map volume, got kind {vol.kind!r}")
    return out


def _fmt(value) -> str:
    return "NA" if value is None else repr(float(value))


def _aggregate(values: list[float | None]) -> tuple[str, str]:
    present = [v for v in values if v is not None]
    if not present:
        return "NA", "NA"
    return repr(statistics.fmean(present)), repr(statistics.median(present))


def cmd_evaluate(args) -> int:
    preds = _load_label_maps(Path(args.pred))
    truths = _load_label_maps(Path(args.truth))
    missing_pred = sorted(truths.keys() - preds.keys())
    missing_truth = sorted(preds.keys() - truths.keys())
    if missing_pred or missing_truth:
        raise DataError(
            "case ids do not match: "
            f"missing predictions for {missing_pred}, missing truth for {missing_truth}"
        )
    rows = []
    results = []
    for cid in sorted(truths):
        result = evaluate_case(preds[cid], truths[cid], case_id=cid)
        results.append(result)
        for name in CLASS_NAMES:
            r = result.per_class[name]
            rows.append(
                f"case={cid} class={name} dice={_fmt(r.dice)} "
                f"sensitivity={_fmt(r.sensitivity)} specificity={_fmt(r.specificity)} "
                f"hausdorff_mm={_fmt(r.hausdorff_max_mm)} hausdorff95_mm={_fmt(r.hausdorff95_mm)}"
            )
    for name in CLASS_NAMES:
        per = [res.per_class[name] for res in results]
        mean_dice, median_dice = _aggregate([r.dice for r in per])
        mean_hd, median_hd = _aggregate([r.hausdorff_max_mm for r in per])
        mean_hd95, median_hd95 = _aggregate([r.hausdorff95_mm for r in per])
        rows.append(
            f"summary={name} mean_dice={mean_dice} median_dice={median_dice} "
            f"mean_hausdorff_mm={mean_hd} median_hausdorff_mm={median_hd} "
            f"mean_hausdorff95_mm={mean_hd95} median_hausdorff95_mm={median_hd95}"
        )
    report = "\n".join(rows) + "\n"
    Path(args.out).write_text(report)
    print(report, end="")
    return 0


def _load_single_case(path: Path) -> Case:
    cases = _load_input_cases(path)
    if len(cases) != 1:
        raise DataError(f"{path}: expected a single case, found {len(cases)}")
    return cases[0]


def cmd_export_slices(args) -> int:
    case = _load_single_case(Path(args.case))
    pred_path = Path(args.pred)
    if pred_path.suffix == ".json":
        labels = read_native(pred_path)
    else:
        labels = read_nifti(pred_path, kind="label_map")
    export_slice(case.image, labels, args.axis, args.index, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxseg",
        description="3D brain-tumor segmentation: synthesize, train, infer, evaluate, visualize.",
    )
    parser.add_argument("--seed", type=int, default=None, help="override the config/default seed")
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS threads (1 = bitwise determinism)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic native-format dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, required=True)
    p.add_argument("--size", required=True, help="extents as DxHxW, e.g. 48x48x48")
    p.add_argument("--difficulty", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict label maps with one or more checkpoints")
    p.add_argument("--checkpoint", required=True, nargs="+")
    p.add_argument("--input", required=True, help="case dir, dataset dir, or BraTS-layout dir")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("native", "nifti"), default="native")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True, help="report file to write")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-slices", help="write a PPM overlay of one slice")
    p.add_argument("--case", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--axis", choices=("axial", "sagittal", "coronal"), required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_slices)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is None and args.command == "synth":
        args.seed = 0
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError(f"--threads must be >= 1, got {args.threads}")
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except VoxsegError as e:
        print(f"error category={e.category} message={e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
