"""Command-line workflow: gen, pretrain, adapt, mine, eval, report.

Exit codes: 0 success, 2 configuration error, 3 missing or unreadable
input, 4 conflicting inputs or a broken run-time invariant.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import __version__, benchmark, metrics
from . import detector as det
from .config import RunConfig
from .detector import DetectorParams
from .distill import TrainState, adapt
from .errors import ConfigConflict, ConfigError, InvariantViolation, MissingInput
from .pseudolabel import extract_hpl, lpl_stages, mine_lpl, mining_dump
from .simdata import SPLITS, load_scene, manifest
from . import store

log = logging.getLogger("lpld")

OUTPUT_ROOT_ENV = "LPLD_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_INVARIANT = 0, 2, 3, 4


# -- shared plumbing -----------------------------------------------------------

def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def output_dir(args, cfg: RunConfig) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or cfg.out_dir) / args.command


def resolve_dataset(args, cfg: RunConfig):
    """Dataset config and seed from the manifest; the run config may not contradict it."""
    data_cfg, data_seed, splits = store.load_manifest(args.manifest)
    if args.config and cfg.dataset.to_dict() != data_cfg.to_dict():
        raise ConfigConflict(f"dataset section of {args.config} differs from manifest {args.manifest}")
    doc = cfg.to_dict()
    doc["dataset"] = data_cfg.to_dict()
    return RunConfig.from_dict(doc), data_seed, splits


def scenes(cfg: RunConfig, data_seed: int, ids):
    return [load_scene(cfg.dataset, data_seed, sid) for sid in ids]


def load_state(path, cfg: RunConfig) -> tuple[str, TrainState]:
    ckpt = store.load_checkpoint(path)
    for params in (ckpt.state.teacher, ckpt.state.student):
        try:
            params.check_shapes(cfg.detector)
        except ValueError as exc:
            raise ConfigConflict(f"checkpoint {path} does not fit the detector config: {exc}") from exc
    return ckpt.kind, ckpt.state


def pick_model(state: TrainState, which: str) -> DetectorParams:
    return state.teacher if which == "teacher" else state.student


def eval_doc(rec: metrics.EvalRecord) -> dict:
    return rec.to_dict()


# -- commands ------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = load_config(args)
    out = output_dir(args, cfg)
    path = store.write_json(out / "manifest.json", manifest(cfg.dataset, cfg.seed))
    store.write_json(out / "run_config.json", cfg.to_dict())
    store.write_meta(out, "gen")
    print(path)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg, data_seed, splits = resolve_dataset(args, load_config(args))
    out = output_dir(args, cfg)
    source = scenes(cfg, data_seed, splits["source"])
    log.info("pretraining on %d source scenes for %d epochs", len(source), cfg.pretrain.epochs)
    params, records = benchmark.pretrain_source(cfg, source)
    store.save_checkpoint(out / "source.ckpt.json", store.Checkpoint.source(params, cfg.digest()))
    store.write_jsonl(out / "pretrain_log.jsonl", records)
    evals = {split: eval_doc(benchmark.evaluate(params, scenes(cfg, data_seed, splits[split]), cfg))
             for split in ("source_eval", "target_eval")}
    store.write_json(out / "eval.json", evals)
    store.write_json(out / "run_config.json", cfg.to_dict())
    store.write_meta(out, "pretrain", manifest=str(args.manifest))
    print(f"source_eval mAP {evals['source_eval']['mAP']:.4f}  target_eval mAP {evals['target_eval']['mAP']:.4f}")
    return EXIT_OK


def adapt_overrides(args) -> dict:
    changes = {}
    if args.no_hpl:
        changes["use_hpl"] = False
    if args.no_lpl:
        changes["use_lpl"] = False
    if args.no_adaptive_weights:
        changes["use_adaptive_weights"] = False
    if args.lpl_loss:
        changes["lpl_loss_kind"] = args.lpl_loss
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    return changes


def cmd_adapt(args) -> int:
    cfg, data_seed, splits = resolve_dataset(args, load_config(args))
    cfg = cfg.with_train(**adapt_overrides(args))
    tcfg = cfg.train_config()
    if not (tcfg.use_hpl or tcfg.use_lpl):
        raise ConfigError("--no-hpl together with --no-lpl leaves nothing to train on")
    out = output_dir(args, cfg)
    kind, state = load_state(args.checkpoint, cfg)
    if kind != "adapted":
        state = TrainState.from_source(state.teacher)
    target = scenes(cfg, data_seed, splits["target"])
    held_out = scenes(cfg, data_seed, splits["target_eval"])
    log.info("adapting on %d target scenes, %d epochs (hpl=%s lpl=%s aw=%s)", len(target), tcfg.epochs,
             tcfg.use_hpl, tcfg.use_lpl, tcfg.use_adaptive_weights)

    rows = [benchmark.epoch_row(state.epoch, benchmark.evaluate(state.teacher, held_out, cfg))]

    def on_epoch(st, recs):
        rows.append(benchmark.epoch_row(st.epoch, benchmark.evaluate(st.teacher, held_out, cfg)))
        log.info("epoch %d: teacher mAP %.4f", st.epoch, rows[-1]["mAP"])

    state, logs = adapt(state, target, cfg.mining, tcfg, cfg.detector, cfg.augment, on_epoch=on_epoch)
    store.save_checkpoint(out / "adapted.ckpt.json", store.Checkpoint("adapted", state, cfg.digest()))
    store.write_jsonl(out / "adapt_log.jsonl", logs)
    store.write_jsonl(out / "epochs.jsonl", rows)
    store.write_json(out / "run_config.json", cfg.to_dict())
    store.write_meta(out, "adapt", manifest=str(args.manifest), checkpoint=str(args.checkpoint))
    print(f"final teacher target_eval mAP {rows[-1]['mAP']:.4f}")
    return EXIT_OK


def cmd_mine(args) -> int:
    cfg, data_seed, splits = resolve_dataset(args, load_config(args))
    out = output_dir(args, cfg)
    _, state = load_state(args.checkpoint, cfg)
    params = pick_model(state, args.model)
    ids = args.scene or splits[args.split]
    known = {sid for split in SPLITS for sid in splits[split]}
    missing = [sid for sid in ids if sid not in known]
    if missing:
        raise MissingInput(f"scene ids not in manifest: {missing}")
    counts = []
    for scene in scenes(cfg, data_seed, ids):
        props = benchmark.mined_proposals(params, scene, cfg)
        hpl = extract_hpl(props, cfg.mining)
        refined = props.boxes if cfg.train.mine_refined else det.refine_boxes(props.boxes, props.scores,
                                                                             props.deltas, cfg.detector)
        lpl = mine_lpl(props, hpl, cfg.mining, refined_boxes=refined)
        store.write_json(out / "mining" / f"{scene.id}.json", mining_dump(scene.id, hpl, lpl))
        stage = metrics.stage_alignment_counts(props, lpl_stages(props, hpl, cfg.mining), scene.objects)
        counts.append(stage)
    summary = {"scenes": len(ids), "alignment": metrics.class_alignment_ratio(counts),
               "stage_totals": {k: sum(c[k][1] for c in counts) for k in ("iou", "bg", "lc")}}
    store.write_json(out / "mining_summary.json", summary)
    store.write_meta(out, "mine", checkpoint=str(args.checkpoint))
    print(f"mined {len(ids)} scenes into {out / 'mining'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, data_seed, splits = resolve_dataset(args, load_config(args))
    out = output_dir(args, cfg)
    _, state = load_state(args.checkpoint, cfg)
    params = pick_model(state, args.model)
    for split in args.split:
        rec = benchmark.evaluate(params, scenes(cfg, data_seed, splits[split]), cfg)
        store.write_json(out / f"eval_{split}.json", eval_doc(rec))
        store.write_text(out / f"eval_{split}.csv", rec.to_csv())
        print(f"{split}: mAP {rec.mAP:.4f}  FNR minor {_pct(rec.fnr_group.get('minor'))}  "
              f"small {_pct(rec.fnr_bucket.get('small'))}")
    store.write_meta(out, "eval", checkpoint=str(args.checkpoint))
    return EXIT_OK


def _pct(v) -> str:
    return "n/a" if v is None else f"{100 * v:.1f}%"


FNR_COLUMNS = ("epoch", "mAP", "tp", "fp", "fn", "fnr_small", "fnr_medium", "fnr_large", "fnr_major", "fnr_minor",
               "score_threshold")
ALIGN_COLUMNS = ("model", "stage", "aligned", "total", "ratio")
SCATTER_COLUMNS = ("model", "width", "height", "class_id", "size_bucket", "status")


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    run_cfg = RunConfig.from_dict(store.read_json(run_dir / "run_config.json", "run config"))
    if args.config:
        # an explicit config only contributes its metric options
        doc = run_cfg.to_dict()
        doc["metrics"] = load_config(args).to_dict()["metrics"]
        run_cfg = RunConfig.from_dict(doc)
    data_cfg, data_seed, splits = store.load_manifest(args.manifest)
    if data_cfg.to_dict() != run_cfg.dataset.to_dict():
        raise ConfigConflict("run directory was produced from a different dataset manifest")
    cfg = run_cfg
    out = output_dir(args, cfg)
    rows = store.read_jsonl(run_dir / "epochs.jsonl")
    _, src_state = load_state(args.checkpoint, cfg)
    _, ada_state = load_state(run_dir / "adapted.ckpt.json", cfg)
    models = {"source": src_state.teacher, "adapted": ada_state.teacher}
    held_out = scenes(cfg, data_seed, splits["target_eval"])
    target = scenes(cfg, data_seed, splits["target"])

    written = [store.write_text(out / "fnr_per_epoch.csv", metrics.rows_to_csv(
        [{k: ("" if r.get(k) is None else r.get(k)) for k in FNR_COLUMNS} for r in rows], FNR_COLUMNS))]
    align_rows, scatter_rows = [], []
    for name, params in models.items():
        grid = benchmark.proposal_histogram(params, held_out, cfg)
        written.append(store.write_text(out / f"conf_iou_hist_{name}.csv", grid.to_csv()))
        st = benchmark.stage_alignment(params, target, cfg)
        for stage in ("iou", "bg", "lc"):
            ratio = st["ratio"].get(stage)
            align_rows.append({"model": name, "stage": stage, "aligned": st["aligned"][stage],
                               "total": st["total"][stage], "ratio": "" if ratio is None else ratio})
        for r in metrics.tp_fn_scatter(benchmark.detections(params, held_out, cfg), cfg.metrics.score_threshold):
            scatter_rows.append({"model": name, **r})
    written.append(store.write_text(out / "alignment_per_stage.csv", metrics.rows_to_csv(align_rows, ALIGN_COLUMNS)))
    written.append(store.write_text(out / "tp_fn_scatter.csv", metrics.rows_to_csv(scatter_rows, SCATTER_COLUMNS)))
    store.write_meta(out, "report", run=str(run_dir), checkpoint=str(args.checkpoint))
    for p in written:
        print(p)
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run config JSON (defaults built in)")
    common.add_argument("--out", type=Path, help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("-v", "--verbose", action="store_true")

    with_data = argparse.ArgumentParser(add_help=False)
    with_data.add_argument("--manifest", type=Path, required=True, help="dataset manifest from `gen`")

    with_ckpt = argparse.ArgumentParser(add_help=False)
    with_ckpt.add_argument("--checkpoint", type=Path, required=True)

    parser = argparse.ArgumentParser(prog="lpld", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="write a dataset manifest")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", parents=[common, with_data], help="train the source detector")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", parents=[common, with_data, with_ckpt], help="source-free adaptation")
    p.add_argument("--no-hpl", action="store_true", help="drop the Mean-Teacher loss on high-confidence labels")
    p.add_argument("--no-lpl", action="store_true", help="drop low-confidence label distillation")
    p.add_argument("--no-adaptive-weights", action="store_true", help="weight every low-confidence label by 1")
    p.add_argument("--lpl-loss", choices=("KL", "CE", "CE+REG"), help="low-confidence loss variant")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("mine", parents=[common, with_data, with_ckpt], help="dump per-scene pseudo labels")
    p.add_argument("--split", default="target", choices=SPLITS)
    p.add_argument("--scene", action="append", help="scene id (repeatable); default: the whole split")
    p.add_argument("--model", default="teacher", choices=("teacher", "student"))
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("eval", parents=[common, with_data, with_ckpt], help="AP50 and FNR records")
    p.add_argument("--split", action="append", choices=SPLITS)
    p.add_argument("--model", default="teacher", choices=("teacher", "student"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common, with_data, with_ckpt],
                       help="plot-ready CSVs for a finished adaptation run (--checkpoint: source model)")
    p.add_argument("--run", type=Path, required=True, help="output directory of `adapt`")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "split", None) is None and args.command == "eval":
        args.split = ["target_eval"]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigConflict as exc:
        print(f"lpld {args.command}: conflicting inputs: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except ConfigError as exc:
        print(f"lpld {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingInput as exc:
        print(f"lpld {args.command}: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except InvariantViolation as exc:
        print(f"lpld {args.command}: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
