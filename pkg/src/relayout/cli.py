"""Command line for the layout editor.

Subcommands: ``learn-concepts`` trains a concept bundle from one annotated
image, ``edit`` runs a layout edit, ``validate`` checks a job spec JSON
without running it, and ``eval`` scores a directory of finished cases.

Exit codes: 0 success, 2 validation problem, 3 backend problem.  Progress
goes to stderr; stdout carries only the result lines.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .backend import BackendError
from .concept_learning import (
    STAGE1_STEPS,
    STAGE2_STEPS,
    learn_stage1_embeddings,
    learn_stage2_finetune,
    save_bundle,
)
from .evaluation import evaluate_cases
from .layout import load_layout
from .layout_guidance import GuidanceConfig
from .noise_init import LfinConfig
from .pipeline import (
    EDIT_MODES,
    INIT_MODES,
    BackendMismatchError,
    DecodeError,
    EditJobSpec,
    Finding,
    SpecValidationError,
    edit_layout,
    resolve_backend,
    spec_from_files,
    validate_spec,
    write_telemetry_csv,
)

_JOB_KEYS = frozenset({
    "image", "layout", "target", "output", "concepts", "backend",
    "seed", "init", "mode", "guidance", "lfin", "projection",
})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relayout",
        description="Move and restyle objects in an image by editing its layout.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    learn = sub.add_parser("learn-concepts",
                           help="train per-object concept tokens from one image")
    learn.add_argument("--image", required=True, help="source image (PNG)")
    learn.add_argument("--layout", required=True, help="layout JSON with masks")
    learn.add_argument("--out", required=True, help="bundle output directory")
    learn.add_argument("--backend", default="toy")
    learn.add_argument("--seed", type=int, default=0)
    learn.add_argument("--stage1-steps", type=int, default=STAGE1_STEPS,
                       help="embedding-only steps (default %(default)s)")
    learn.add_argument("--stage2-steps", type=int, default=STAGE2_STEPS,
                       help="weight fine-tune steps (default %(default)s)")
    learn.set_defaults(func=cmd_learn_concepts)

    edit = sub.add_parser("edit", help="run one layout edit")
    edit.add_argument("--image", required=True, help="source image (PNG)")
    edit.add_argument("--layout", required=True, help="source layout JSON")
    edit.add_argument("--target", required=True, help="target layout JSON")
    edit.add_argument("--out", required=True, help="edited image output path")
    edit.add_argument("--concepts", default=None, help="concept bundle directory")
    edit.add_argument("--backend", default="toy",
                      help="toy or adapter:<name> (default %(default)s)")
    edit.add_argument("--seed", type=int, default=0)
    edit.add_argument("--init", choices=INIT_MODES, default="invert",
                      help="target latent initialization (default %(default)s)")
    edit.add_argument("--mode", choices=EDIT_MODES, default="async")
    edit.add_argument("--eta", type=float, default=GuidanceConfig.eta,
                      help="guidance step size (default %(default)s)")
    edit.add_argument("--guidance-fraction", type=float,
                      default=GuidanceConfig.guidance_fraction,
                      help="fraction of steps with guidance (default %(default)s)")
    edit.add_argument("--lfin-stop", type=float, default=None,
                      help="inversion stop fraction for --init lfin")
    edit.add_argument("--lfin-lambda", type=float, default=None,
                      help="signal/noise blend weight for --init lfin")
    edit.add_argument("--debug-dir", default=None,
                      help="dump projection fields and region maps here")
    edit.add_argument("--telemetry", default=None,
                      help="write per-step loss CSV here")
    edit.set_defaults(func=cmd_edit)

    validate = sub.add_parser("validate",
                              help="check a job spec JSON without running it")
    validate.add_argument("--spec", required=True, help="job spec JSON file")
    validate.set_defaults(func=cmd_validate)

    evaluate = sub.add_parser("eval", help="score a directory of finished cases")
    evaluate.add_argument("--cases", required=True, help="directory of case folders")
    evaluate.add_argument("--out", required=True, help="report JSON output path")
    evaluate.set_defaults(func=cmd_eval)

    return parser


def _print_finding(finding: Finding, file=None):
    suffix = f" (object {finding.object_id!r})" if finding.object_id else ""
    print(f"{finding.level}: [{finding.code}] {finding.message}{suffix}",
          file=file or sys.stderr)


def cmd_learn_concepts(args) -> int:
    layout = load_layout(args.layout)
    with Image.open(args.image) as img:
        image = np.asarray(img.convert("RGB"))
    backend = resolve_backend(args.backend, args.seed, layout)
    x0 = backend.encode_image(image)
    masks = layout.masks_at_resolution(x0.shape[-2:])
    objects = [(obj.id, f"<{obj.id}>", obj.token) for obj in layout.objects]

    bundle = learn_stage1_embeddings(backend, x0, masks, objects,
                                     backend.schedule, steps=args.stage1_steps,
                                     seed=args.seed)
    print(f"stage 1 done: {args.stage1_steps} embedding steps", file=sys.stderr)
    bundle = learn_stage2_finetune(backend, bundle, x0, masks, backend.schedule,
                                   steps=args.stage2_steps, seed=args.seed)
    print(f"stage 2 done: {args.stage2_steps} fine-tune steps", file=sys.stderr)

    path = save_bundle(bundle, args.out)
    print(f"bundle: {path}")
    print(f"backend: {bundle.backend_identity}")
    return 0


def cmd_edit(args) -> int:
    lfin = None
    if args.lfin_stop is not None or args.lfin_lambda is not None:
        if args.init != "lfin":
            print("note: --lfin-* flags are ignored unless --init lfin",
                  file=sys.stderr)
        else:
            lfin = LfinConfig(
                stop_fraction=0.7 if args.lfin_stop is None else args.lfin_stop,
                blend_lambda=0.7 if args.lfin_lambda is None else args.lfin_lambda,
                seed=args.seed,
            )
    spec = spec_from_files(
        args.image, args.layout, args.target, args.out,
        concepts=args.concepts, backend=args.backend, seed=args.seed,
        init=args.init, mode=args.mode,
        guidance=GuidanceConfig(eta=args.eta,
                                guidance_fraction=args.guidance_fraction),
        lfin=lfin, debug_dir=args.debug_dir,
    )

    def progress(event: dict):
        if event["type"] == "step":
            losses = event.get("losses") or {}
            tail = ""
            if losses:
                mean = sum(losses.values()) / len(losses)
                tail = f"  loss {mean:.4f}"
            print(f"step {event['completed']}/{event['total']}{tail}",
                  file=sys.stderr)

    _, manifest = edit_layout(spec, progress=progress)
    if args.telemetry:
        write_telemetry_csv(manifest, args.telemetry)
        print(f"telemetry: {args.telemetry}")
    print(f"wrote: {args.out}")
    final = manifest.get("final_losses") or {}
    if final:
        mean = sum(final.values()) / len(final)
        print(f"final region loss: {mean:.6f}")
    return 0


def _spec_from_job_doc(doc: dict, base: Path) -> EditJobSpec:
    if not isinstance(doc, dict):
        raise SpecValidationError([Finding(
            "error", "job-spec", "job spec must be a JSON object")])
    unknown = sorted(set(doc) - _JOB_KEYS)
    if unknown:
        raise SpecValidationError([Finding(
            "error", "job-spec", f"unknown job spec keys: {', '.join(unknown)}")])
    missing = [key for key in ("image", "layout", "target") if key not in doc]
    if missing:
        raise SpecValidationError([Finding(
            "error", "job-spec", f"job spec missing keys: {', '.join(missing)}")])
    concepts = doc.get("concepts")
    try:
        return spec_from_files(
            base / doc["image"], base / doc["layout"], base / doc["target"],
            base / doc.get("output", "edited.png"),
            concepts=str(base / concepts) if concepts else None,
            backend=doc.get("backend", "toy"),
            seed=int(doc.get("seed", 0)),
            init=doc.get("init", "invert"),
            mode=doc.get("mode", "async"),
            guidance=GuidanceConfig(**(doc.get("guidance") or {})),
            lfin=LfinConfig(**doc["lfin"]) if doc.get("lfin") else None,
        )
    except SpecValidationError:
        raise
    except (TypeError, ValueError) as e:
        raise SpecValidationError([
            Finding("error", "config-invalid", str(e))]) from e


def cmd_validate(args) -> int:
    spec_path = Path(args.spec)
    try:
        doc = json.loads(spec_path.read_text())
    except json.JSONDecodeError as e:
        raise SpecValidationError([Finding(
            "error", "json-parse", f"{spec_path.name}: {e}")]) from e
    spec = _spec_from_job_doc(doc, spec_path.parent)
    findings = validate_spec(spec)
    for finding in findings:
        _print_finding(finding, file=sys.stdout)
    errors = [f for f in findings if f.level == "error"]
    if errors:
        print(f"invalid: {len(errors)} error(s)")
        return 2
    print("ok")
    return 0


def cmd_eval(args) -> int:
    report = evaluate_cases(args.cases, out_path=args.out)
    for metric in ("alignment", "similarity"):
        summary = report["summary"][metric]
        mean = "-" if summary["mean"] is None else f"{summary['mean']:.4f}"
        line = f"{metric}: mean {mean} over {summary['count']} case(s)"
        if summary.get("modes"):
            modes = ", ".join(f"{k}={v}" for k, v in sorted(summary["modes"].items()))
            line += f"  [{modes}]"
        print(line)
    print(f"report: {args.out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SpecValidationError as e:
        for finding in e.findings:
            _print_finding(finding)
        print(f"validation failed with {len(e.findings)} finding(s)",
              file=sys.stderr)
        return 2
    except (BackendError, BackendMismatchError, DecodeError) as e:
        print(f"backend error: {e}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
