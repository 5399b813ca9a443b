import argparse
import json
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from rich.markup import escape
from rich.table import Table

from . import __version__
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .constants import (
    APP_NAME,
    EXIT_DATA,
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_USAGE,
    INPUT_SIZE,
    INTERP_FACTOR,
    LSTM_HIDDEN,
    OBS_LEN,
    TRAIN_FRACTION,
)
from .dataset import DatasetError, load_dataset, write_dataset
from .imagery import ImageryError, ImageStore
from .metrics import MetricsError, evaluate, format_report, format_score_line, read_scores
from .model import (
    ABLATION_SUBSETS,
    MODALITIES,
    BaselineConfig,
    ConfigError,
    NetworkConfig,
    ablation_modalities,
    predict_scores,
)
from .pipeline import (
    MODES,
    ObservationSample,
    SampleSpec,
    Track,
    TrackError,
    interpolate_track,
    prepare_samples,
    rebase_track,
    split_tracks,
    summarize_samples,
    summarize_tracks,
)
from .settings import RunConfig, apply_overrides, load_run_config
from .storage import write_text
from .synth import LABEL_RULES, ScenarioError, generate
from .training import EpochLog, TrainingError, format_epoch_log, train
from .ui import console, make_progress

DATA_ERRORS = (
    DatasetError,
    TrackError,
    ImageryError,
    CheckpointError,
    TrainingError,
    MetricsError,
    ScenarioError,
)


# Shared helpers


def _run_config(opts: argparse.Namespace) -> RunConfig:
    run = load_run_config(opts.config)
    run = apply_overrides(
        run,
        seed=opts.seed,
        mode=opts.mode,
        map_strategy=opts.map_strategy,
        epochs=getattr(opts, "epochs", None),
        paths={"out": opts.out, "dataset": getattr(opts, "dataset", None)},
    )
    console.log(json.dumps(run.effective(), sort_keys=True), markup=False, highlight=False)
    return run


def _required_path(run: RunConfig, key: str) -> Path:
    value = run.paths.get(key)
    if not value:
        raise ConfigError(f"No {key} path given; pass it on the command line or under 'paths' in --config")
    return Path(value)


def _sample_spec(run: RunConfig) -> SampleSpec:
    size = tuple(run.model.get("map_size", INPUT_SIZE))
    return SampleSpec(
        mode=run.mode,
        obs_len=int(run.model.get("obs_len", OBS_LEN)),
        map_size=size,
        scene_size=tuple(run.model.get("scene_size", size)),
    )


def _spec_meta(spec: SampleSpec) -> dict:
    return {"mode": spec.mode, "obs_len": spec.obs_len, "map_size": list(spec.map_size), "scene_size": list(spec.scene_size)}


def _prepare(tracks: Sequence[Track], root: Path, spec: SampleSpec, what: str) -> list[ObservationSample]:
    with make_progress() as prog:
        task = prog.add_task(f"Preparing {what} samples", total=len(tracks))
        samples = prepare_samples(tracks, ImageStore(root), spec, on_track=lambda _: prog.advance(task))
    summary = summarize_samples(samples)
    unused = len(tracks) - len({s.track_id for s in samples})
    if unused:
        console.log(f"[yellow]Skipping {unused} {what} tracks too short for a 1-2 s window[/]")
    console.log(
        f"{what}: {len(tracks)} tracks -> {summary['samples']} samples "
        f"({summary['positives']} crossing, {summary['negatives']} not crossing)"
    )
    return samples


def _network_config(run: RunConfig, kind: str, spec: SampleSpec, samples: Sequence[ObservationSample]) -> NetworkConfig:
    if not samples:
        raise TrainingError("No observation windows fit the 1-2 s horizon in the training tracks")
    ped_dim, veh_dim = samples[0].ped_motion.shape[1], samples[0].veh_motion.shape[1]
    if kind == "baseline":
        return BaselineConfig(
            coord_dim=ped_dim // 2,
            lstm_hidden=int(run.model.get("lstm_hidden", LSTM_HIDDEN)),
            obs_len=spec.obs_len,
        )
    return run.model_config(
        map_channels_per_step=spec.map_channels_per_step,
        ped_feature_dim=ped_dim,
        veh_feature_dim=veh_dim,
    )


def _train(samples, config, run, validation=None, modalities=MODALITIES, label="Training"):
    train_config = run.train_config()
    with make_progress() as prog:
        task = prog.add_task(label, total=train_config.epochs)

        def on_epoch(entry: EpochLog) -> None:
            console.log(format_epoch_log(entry), markup=False, highlight=False)
            prog.advance(task)

        return train(samples, config, train_config, validation=validation, modalities=modalities, on_epoch=on_epoch)


def _checkpoint_samples(checkpoint: Checkpoint, opts: argparse.Namespace, run: RunConfig) -> list[ObservationSample]:
    if opts.mode and opts.mode != checkpoint.mode:
        raise CheckpointError(f"Checkpoint was trained on {checkpoint.mode} data, not {opts.mode}")
    meta = checkpoint.meta.get("sample_spec")
    if not isinstance(meta, dict):
        raise CheckpointError("Checkpoint does not record its sample layout")
    spec = SampleSpec(
        mode=meta["mode"],
        obs_len=meta["obs_len"],
        map_size=tuple(meta["map_size"]),
        scene_size=tuple(meta["scene_size"]),
    )
    dataset = _required_path(run, "dataset")
    samples = _prepare(load_dataset(dataset, checkpoint.mode), dataset.parent, spec, "evaluation")
    dims = checkpoint.feature_dims
    for sample in samples[:1]:
        ped, veh = sample.ped_motion.shape[1], sample.veh_motion.shape[1]
        if checkpoint.kind == "baseline":
            fits = ped >= dims["ped"]
        else:
            fits = (ped, veh) == (dims["ped"], dims["veh"])
        if not fits:
            raise CheckpointError(f"Dataset features (ped {ped}, veh {veh}) do not fit the checkpoint config")
    return samples


def _modalities(checkpoint: Checkpoint) -> tuple[str, ...]:
    return tuple(checkpoint.meta.get("modalities", MODALITIES))


# Commands


def cmd_generate(opts: argparse.Namespace) -> int:
    run = _run_config(opts)
    extra = {"n_tracks": opts.n_tracks, "label_rule": opts.rule, "noise_level": opts.noise}
    run = replace(run, scenario={**run.scenario, **{k: v for k, v in extra.items() if v is not None}})
    scenario = run.scenario_config()
    out = Path(run.paths.get("out") or "synthetic/tracks.ndjson")
    with make_progress() as prog:
        task = prog.add_task("Generating tracks", total=scenario.n_tracks)
        generate(scenario, out, on_track=lambda _: prog.advance(task))
    summary = summarize_tracks(load_dataset(out, scenario.mode))
    console.log(
        f"[bold green]Wrote[/] {out}: {summary['tracks']} tracks, "
        f"{summary['crossing']} crossing / {summary['non_crossing']} not crossing"
    )
    return EXIT_OK


def cmd_prepare(opts: argparse.Namespace) -> int:
    run = _run_config(opts)
    dataset = _required_path(run, "dataset")
    tracks = load_dataset(dataset, run.mode)
    samples = _prepare(tracks, dataset.parent, _sample_spec(run), "dataset")
    if run.paths.get("out"):
        lines = [
            json.dumps(
                {"track_id": s.track_id, "window": s.window_index, "tte": s.tte, "label": s.label},
                sort_keys=True,
            )
            for s in samples
        ]
        write_text(Path(run.paths["out"]), "".join(line + "\n" for line in lines))
        console.log(f"[bold green]Wrote[/] {run.paths['out']}")
    return EXIT_OK


def cmd_train(opts: argparse.Namespace) -> int:
    run = _run_config(opts)
    dataset = _required_path(run, "dataset")
    out = _required_path(run, "out")
    spec = _sample_spec(run)
    tracks = load_dataset(dataset, run.mode)
    validation = None
    if opts.holdout:
        tracks, held_out = split_tracks(tracks, TRAIN_FRACTION, run.train_config().seed)
        validation = _prepare(held_out, dataset.parent, spec, "validation") if held_out else None
        if not validation:
            console.log("[yellow]No held-out windows; training without validation[/]")
            validation = None
    samples = _prepare(tracks, dataset.parent, spec, "training")
    config = _network_config(run, opts.model, spec, samples)
    result = _train(samples, config, run, validation=validation)

    meta = {
        "modalities": list(MODALITIES),
        "sample_spec": _spec_meta(spec),
        "class_weights": list(result.class_weights),
        "best_epoch": result.best_epoch,
        "seed": run.train_config().seed,
    }
    save_checkpoint(out, Checkpoint(config, result.params, run.mode, meta))
    if opts.log:
        write_text(Path(opts.log), "".join(format_epoch_log(e) + "\n" for e in result.history))
    console.log(f"[bold green]Saved checkpoint[/] {out}")
    return EXIT_OK


def cmd_eval(opts: argparse.Namespace) -> int:
    run = _run_config(opts)
    if opts.scores:
        scores, labels = read_scores(Path(opts.scores).read_text(encoding="utf-8"))
    else:
        if not opts.checkpoint:
            raise ConfigError("eval needs --checkpoint (with a dataset) or --scores")
        checkpoint = load_checkpoint(Path(opts.checkpoint))
        samples = _checkpoint_samples(checkpoint, opts, run)
        scores = predict_scores(samples, checkpoint.params, checkpoint.config, _modalities(checkpoint))
        labels = [s.label for s in samples]
    line = format_report(evaluate(scores, labels))
    console.log(line, markup=False, highlight=False)
    if run.paths.get("out"):
        write_text(Path(run.paths["out"]), line + "\n")
    return EXIT_OK


def cmd_predict(opts: argparse.Namespace) -> int:
    run = _run_config(opts)
    out = _required_path(run, "out")
    checkpoint = load_checkpoint(Path(opts.checkpoint))
    samples = _checkpoint_samples(checkpoint, opts, run)
    scores = predict_scores(samples, checkpoint.params, checkpoint.config, _modalities(checkpoint))
    lines = [format_score_line(s.track_id, s.window_index, score, s.label) for s, score in zip(samples, scores)]
    write_text(out, "".join(line + "\n" for line in lines))
    console.log(f"[bold green]Wrote[/] {len(lines)} scores to {out}")
    return EXIT_OK


def cmd_interpolate(opts: argparse.Namespace) -> int:
    run = _run_config(opts)
    out = _required_path(run, "out")
    source = Path(opts.input)
    tracks = load_dataset(source)
    # refs in the output resolve from its own directory
    dense = [rebase_track(interpolate_track(t, opts.factor), source.parent, out.parent) for t in tracks]
    write_dataset(out, dense)
    frames = sum(len(t.frames) for t in dense)
    console.log(f"[bold green]Wrote[/] {out}: {len(dense)} tracks, {frames} frames")
    return EXIT_OK


def cmd_ablate(opts: argparse.Namespace) -> int:
    run = _run_config(opts)
    dataset = _required_path(run, "dataset")
    spec = _sample_spec(run)
    train_tracks, test_tracks = split_tracks(load_dataset(dataset, run.mode), TRAIN_FRACTION, run.train_config().seed)
    if not test_tracks:
        raise TrainingError("Ablation needs at least two tracks for a held-out split")
    train_samples = _prepare(train_tracks, dataset.parent, spec, "training")
    test_samples = _prepare(test_tracks, dataset.parent, spec, "held-out")
    if not test_samples:
        raise TrainingError("No held-out observation windows fit the 1-2 s horizon")
    config = _network_config(run, "full", spec, train_samples)
    labels = [s.label for s in test_samples]

    rows = []
    for subset in opts.subsets:
        modalities = ablation_modalities(subset)
        result = _train(train_samples, config, run, modalities=modalities, label=f"Training {subset}")
        report = evaluate(predict_scores(test_samples, result.params, config, modalities), labels)
        rows.append((subset, report))

    table = Table(title="Held-out metrics per input subset")
    for column in ("subset", "acc", "auc", "f1", "precision"):
        table.add_column(column, justify="left" if column == "subset" else "right")
    for subset, report in rows:
        values = format_report(report).split()
        table.add_row(subset, *(v.partition("=")[2] for v in values[:4]))
    console.print(table)

    lines = [f"subset={subset} {format_report(report)}" for subset, report in rows]
    if run.paths.get("out"):
        write_text(Path(run.paths["out"]), "".join(line + "\n" for line in lines))
    return EXIT_OK


# Parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config (sections: mode, model, train, scenario, paths).")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--map-strategy", choices=("sequential", "atrous", "multiscale"))
    common.add_argument("--mode", choices=MODES)

    parser = argparse.ArgumentParser(prog=APP_NAME)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="Write a synthetic dataset.")
    p.add_argument("--n-tracks", type=int)
    p.add_argument("--rule", choices=LABEL_RULES)
    p.add_argument("--noise", type=float)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("prepare", parents=[common], help="Validate a dataset and list its observation windows.")
    p.add_argument("dataset", nargs="?")
    p.set_defaults(handler=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="Train and write a checkpoint.")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--model", choices=("full", "baseline"), default="full")
    p.add_argument("--epochs", type=int)
    p.add_argument("--holdout", action="store_true", help="Hold out 30%% of the tracks for validation.")
    p.add_argument("--log", help="Also write the per-epoch lines to this file.")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="Metrics of a checkpoint on a dataset, or of a scores file.")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--checkpoint")
    p.add_argument("--scores")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="Write one crossing score per observation window.")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("interpolate", parents=[common], help="Upsample keyframe tracks (2 Hz to 10 Hz).")
    p.add_argument("input")
    p.add_argument("--factor", type=int, default=INTERP_FACTOR)
    p.set_defaults(handler=cmd_interpolate)

    p = sub.add_parser("ablate", parents=[common], help="Train and compare input modality subsets.")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--subsets", nargs="+", choices=list(ABLATION_SUBSETS), default=list(ABLATION_SUBSETS))
    p.add_argument("--epochs", type=int)
    p.set_defaults(handler=cmd_ablate)

    for command in sub.choices.values():
        command.set_defaults(usage=command.format_usage())
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        opts = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    try:
        return opts.handler(opts)
    except ConfigError as exc:
        console.log(f"[red]Config error:[/] {escape(str(exc))}")
        console.print(escape(opts.usage.rstrip()), highlight=False)
        console.print(f"Run '{APP_NAME} {opts.command} --help' for every option.", highlight=False)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        console.log(f"[red]Data error:[/] {escape(str(exc))}")
        return EXIT_DATA
    except Exception as exc:
        console.log(f"[red]Failed:[/] {escape(str(exc))}")
        return EXIT_RUNTIME
