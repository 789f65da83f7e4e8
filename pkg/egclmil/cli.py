'''
egclmil / cli.py

Command-line entry point

    egclmil synth   --out DIR [--spec FILE]
    egclmil stain   --in DIR --out DIR [--basis-mode per_patch|pooled] [--reference FILE]
    egclmil split   --config FILE --out DIR
    egclmil train   --config FILE [--out DIR]
    egclmil eval    --run DIR --fold K --out DIR
    egclmil sweep   --config FILE --grid 0,0.5 --modes cl,egcl --repeats 3 --out DIR
    egclmil report  --run DIR [--out DIR]

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration,
3 a fold diverged (partial results are kept).
'''
import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import enable_logging
from .bagdata import (
    TaskSchema,
    generate_synthetic_cohort,
    load_manifest,
    load_synthetic_spec,
    remap_labels,
    write_cohort,
)
from .config import TASK_ALIASES, load_config
from .errors import ConfigError, FoldDiverged, StainError, UsageError, egclmilError
from .metrics import emit_report
from .model import load_checkpoint
from .stain import (
    estimate_slide_basis,
    estimate_stain_basis,
    load_reference_basis,
    normalize_patch,
    read_patch,
    rgb_to_od,
    write_patch,
)
from .train import (
    build_test_result,
    lambda_sweep,
    load_plan,
    run_cv,
    save_plan,
    slides_of,
    stratified_patient_kfold,
)

_logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / 'data'
DEFAULT_SYNTHETIC_SPEC = DATA_DIR / 'synthetic_7class.json'

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


# =============================================================================
# Helpers
# =============================================================================
def _prepare_out(path: Path, force: bool) -> Path:
    ''' Refuse a non-empty output directory unless forced '''
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise UsageError(f'Output path {path} exists and is not a directory')
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f'Output directory {path} is not empty (use --force to write into it)')
    path.mkdir(parents=True, exist_ok=True)
    return path


def _overrides(args) -> dict:
    ''' CLI flags in config-document shape, unset flags omitted '''
    sections = {
        'loss': {
            'mode': getattr(args, 'mode', None),
            'lambda': getattr(args, 'lam', None),
            'gamma': getattr(args, 'gamma', None),
        },
        'train': {
            'seed': getattr(args, 'seed', None),
            'jobs': getattr(args, 'jobs', None),
        },
        'model': {'kind': getattr(args, 'model', None)},
    }
    overrides = {
        name: {k: v for k, v in values.items() if v is not None}
        for name, values in sections.items()
    }
    if getattr(args, 'task', None) is not None:
        overrides['task'] = args.task
    return overrides


def _load_run_config(args):
    config_file = Path(args.config) if getattr(args, 'config', None) else None
    return load_config(config_file, _overrides(args))


def _load_task_cohort(config, manifest_path: Optional[Path] = None):
    manifest = load_manifest(manifest_path or config.cohort_manifest)
    cohort = remap_labels(manifest, TaskSchema(config.task))
    return cohort, manifest.load_bags()


def _run_id(config) -> str:
    return (
        f'{config.task}_{config.model.kind}_{config.loss.mode}'
        f'_lambda{config.loss.lam:g}_seed{config.train.seed}'
    )


def _parse_floats(text: str, flag: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise ConfigError(f'{flag} must be a comma-separated list of numbers: {text!r}')
    if not values:
        raise ConfigError(f'{flag} must not be empty')
    return values


def _print_summary(title: str, aggregate: dict) -> None:
    slide = aggregate['slide']
    print()
    print(title)
    print('-' * 40)
    for metric in ('accuracy', 'macro_precision', 'macro_recall', 'macro_f1', 'weighted_f1'):
        print(f'  {metric:<16} {slide[metric]["mean"]:.4f} +- {slide[metric]["std"]:.4f}')
    print()


# =============================================================================
# Commands
# =============================================================================
def cmd_synth(args) -> int:
    spec_path = Path(args.spec) if args.spec else DEFAULT_SYNTHETIC_SPEC
    spec = load_synthetic_spec(spec_path)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    out = _prepare_out(Path(args.out), args.force)
    manifest, bags = generate_synthetic_cohort(spec)
    manifest_path = write_cohort(manifest, bags, out)
    print(f'Wrote {len(bags)} bags and {manifest_path}')
    return EXIT_OK


def _slide_key(path: Path) -> str:
    ''' Slide of a patch file named <slide>_<anything>.ppm '''
    return path.stem.split('_', 1)[0]


def cmd_stain(args) -> int:
    config = _load_run_config(args)
    stain = config.stain
    basis_mode = args.basis_mode or stain.basis_mode
    reference = load_reference_basis(args.reference or stain.reference)

    in_dir = Path(args.in_dir)
    if not in_dir.is_dir():
        raise UsageError(f'Input directory {in_dir} does not exist')
    inputs = sorted(p for p in in_dir.iterdir() if p.suffix.lower() == '.ppm')
    out = _prepare_out(Path(args.out), args.force)
    if not inputs:
        _logger.warning(f'No .ppm patches found in {in_dir}')
        print(f'Warning: no .ppm patches found in {in_dir}')
        return EXIT_OK

    groups: Dict[str, List[Path]] = {}
    for path in inputs:
        key = _slide_key(path) if basis_mode == 'pooled' else path.name
        groups.setdefault(key, []).append(path)

    fallbacks = 0
    for key, paths in groups.items():
        patches = [read_patch(p) for p in paths]
        try:
            if basis_mode == 'pooled':
                bases = [estimate_slide_basis(patches, stain.beta, stain.alpha_pct)] * len(patches)
            else:
                bases = [estimate_stain_basis(rgb_to_od(p), stain.beta, stain.alpha_pct) for p in patches]
        except StainError as e:
            _logger.warning(f'Stain basis for {key} failed, copying input: {e}')
            for p in paths:
                shutil.copyfile(p, out / p.name)
            fallbacks += len(paths)
            continue
        for path, patch, basis in zip(paths, patches, bases):
            write_patch(normalize_patch(patch, basis, reference), out / path.name)

    print(f'Normalized {len(inputs) - fallbacks} patch(es), copied {fallbacks} unchanged')
    return EXIT_OK


def cmd_split(args) -> int:
    config = _load_run_config(args)
    manifest_path = Path(args.manifest) if args.manifest else None
    manifest = load_manifest(manifest_path or config.cohort_manifest, check_files=False)
    cohort = remap_labels(manifest, TaskSchema(config.task))
    plan = stratified_patient_kfold(
        cohort, config.train.n_folds, config.train.fractions, config.train.seed
    )
    out = _prepare_out(Path(args.out), args.force)
    save_plan(plan, out / 'splits.json')
    for message in plan.warnings:
        print(f'Warning: {message}')
    print(f'Wrote {out / "splits.json"} ({plan.n_folds} folds)')
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_run_config(args)
    run_dir = Path(args.out) if args.out else Path(config.paths.runs) / _run_id(config)
    run_dir = _prepare_out(run_dir, args.force)
    cohort, bags = _load_task_cohort(config)
    plan = load_plan(Path(args.splits)) if args.splits else None
    report = run_cv(cohort, bags, config, plan=plan, run_dir=run_dir)
    _print_summary(f'Run {run_dir}', report.aggregate)
    if report.partial:
        folds = ', '.join(str(f['fold']) for f in report.failed_folds)
        print(f'Error: fold(s) {folds} diverged or failed; partial results kept in {run_dir}')
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir = Path(args.run) if args.run else None
    checkpoint = Path(args.checkpoint) if args.checkpoint else run_dir / f'fold_{args.fold}' / 'checkpoint.bin'
    config_path = Path(args.config) if args.config else run_dir / 'config.json'
    splits_path = Path(args.splits) if args.splits else run_dir / 'splits.json'

    config = load_config(config_path, _overrides(args))
    cohort, bags = _load_task_cohort(config)
    plan = load_plan(splits_path)
    folds = {f.index: f for f in plan.folds}
    if args.fold not in folds:
        raise UsageError(f'Fold {args.fold} not in {splits_path}')

    head, class_names = load_checkpoint(checkpoint)
    if tuple(class_names) != tuple(cohort.class_names):
        raise UsageError(f'Checkpoint classes {class_names} do not match task {config.task}')

    fold = folds[args.fold]
    result = build_test_result(head, fold.index, cohort, slides_of(cohort, fold.test), bags)
    out = _prepare_out(Path(args.out), args.force)
    with open(out / 'result.json', 'w') as f:
        json.dump(result.to_dict(), f, indent=2, sort_keys=True)
        f.write('\n')
    metrics = result.slide_metrics
    print(f'Fold {fold.index}: accuracy {metrics["accuracy"]:.4f}, macro F1 {metrics["macro_f1"]:.4f}')
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _load_run_config(args)
    grid = _parse_floats(args.grid, '--grid')
    modes = [m.strip() for m in args.modes.split(',') if m.strip()]
    bad = [m for m in modes if m not in ('cl', 'egcl')]
    if bad or not modes:
        raise ConfigError(f'--modes must list cl and/or egcl: {args.modes!r}')
    if args.repeats < 1:
        raise ConfigError(f'--repeats must be >= 1: {args.repeats}')

    out = _prepare_out(Path(args.out), args.force)
    cohort, bags = _load_task_cohort(config)
    report = lambda_sweep(cohort, bags, config, grid, modes, args.repeats, run_dir=out)
    print(report.to_frame().to_string(index=False))
    partial = [k for k, cv in report.runs.items() if cv.partial]
    if partial:
        print(f'Error: {len(partial)} sweep run(s) had diverged folds')
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    config = load_config(run_dir / 'config.json')
    documents = []
    for path in sorted(run_dir.glob('fold_*/result.json'), key=lambda p: int(p.parent.name.split('_')[1])):
        with open(path, 'r') as f:
            documents.append(json.load(f))
    if not documents:
        raise UsageError(f'No fold results under {run_dir}')
    out = Path(args.out) if args.out else run_dir / 'report'
    out = _prepare_out(out, args.force)
    class_names = documents[0]['class_names']
    paths = emit_report(
        documents, out, class_names,
        task=config.task, method=config.loss.mode, model=config.model.kind,
    )
    print(f'Wrote {len(paths)} report file(s) to {out}')
    return EXIT_OK


# =============================================================================
# Parser
# =============================================================================
def _add_common(parser: argparse.ArgumentParser, out_required: bool = True) -> None:
    parser.add_argument('--config', metavar='FILE', help='JSON run configuration')
    parser.add_argument('--seed', type=int, metavar='INT', help='Seed for every random choice')
    parser.add_argument('--out', required=out_required, metavar='DIR', help='Output directory')
    parser.add_argument('--force', action='store_true', help='Write into a non-empty output directory')


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--task', choices=sorted(TASK_ALIASES), help='2, 3, 6 or 7 classes')
    parser.add_argument('--mode', choices=('baseline', 'cl', 'egcl'), help='Loss mode')
    parser.add_argument('--lambda', dest='lam', type=float, metavar='FLOAT', help='Contrastive weight')
    parser.add_argument('--gamma', type=float, metavar='FLOAT', help='Expert-pair negative weight')
    parser.add_argument('--model', choices=('clam', 'meanmil_linear', 'meanmil_mlp'), help='Slide head')
    parser.add_argument('--jobs', type=int, metavar='INT', help='Worker processes')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='egclmil',
        description='Attention MIL slide classification with expert-guided contrastive learning',
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', help='Generate a synthetic cohort')
    _add_common(p)
    p.add_argument('--spec', metavar='FILE', help='Synthetic cohort spec (default: shipped 7-class spec)')
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser('stain', help='Macenko-normalize a directory of PPM patches')
    _add_common(p)
    p.add_argument('--in', dest='in_dir', required=True, metavar='DIR', help='Input patch directory')
    p.add_argument('--basis-mode', choices=('per_patch', 'pooled'), help='Basis per patch or per slide')
    p.add_argument('--reference', metavar='FILE', help='Reference stain basis JSON')
    p.set_defaults(func=cmd_stain)

    p = sub.add_parser('split', help='Write a patient-stratified fold plan')
    _add_common(p)
    _add_run_flags(p)
    p.add_argument('--manifest', metavar='FILE', help='Cohort manifest (default: from config)')
    p.set_defaults(func=cmd_split)

    p = sub.add_parser('train', help='Cross-validated training run')
    _add_common(p, out_required=False)
    _add_run_flags(p)
    p.add_argument('--splits', metavar='FILE', help='Reuse a split plan')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('eval', help='Evaluate a fold checkpoint on its test patients')
    _add_common(p)
    p.add_argument('--run', metavar='DIR', help='Run directory supplying checkpoint, config and splits')
    p.add_argument('--fold', type=int, required=True, metavar='K', help='Fold index')
    p.add_argument('--checkpoint', metavar='FILE', help='Checkpoint (default: RUN/fold_K/checkpoint.bin)')
    p.add_argument('--splits', metavar='FILE', help='Split plan (default: RUN/splits.json)')
    p.add_argument('--task', choices=sorted(TASK_ALIASES), help='2, 3, 6 or 7 classes')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('sweep', help='Lambda sensitivity sweep')
    _add_common(p)
    _add_run_flags(p)
    p.add_argument('--grid', default='0,0.3,0.5,0.8,1.0', metavar='LIST', help='Comma-separated lambdas')
    p.add_argument('--modes', default='cl', metavar='LIST', help='Comma-separated cl/egcl')
    p.add_argument('--repeats', type=int, default=1, metavar='INT', help='Seeds per grid point')
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser('report', help='Tabulate a run directory')
    _add_common(p, out_required=False)
    p.add_argument('--run', required=True, metavar='DIR', help='Run directory')
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    enable_logging(os.environ.get('EGCLMIL_LOG', 'info'))
    args = build_parser().parse_args(argv)

    if args.command == 'eval' and not args.run and not (args.checkpoint and args.config and args.splits):
        print('Error: eval needs --run or all of --checkpoint, --config and --splits')
        return EXIT_FAILURE

    try:
        return args.func(args)
    except ConfigError as e:
        _logger.error(f'Invalid configuration: {e}')
        print(f'Error: {e}')
        return EXIT_CONFIG
    except FoldDiverged as e:
        _logger.error(str(e))
        print(f'Error: {e}')
        return EXIT_DIVERGED
    except egclmilError as e:
        _logger.error(f'{args.command} failed: {e}')
        print(f'Error: {e}')
        return EXIT_FAILURE
    except OSError as e:
        _logger.error(f'{args.command} failed: {e}')
        print(f'Error: {e}')
        return EXIT_FAILURE
    except KeyboardInterrupt:
        print('\nOperation cancelled.')
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
