"""Command-line surface: prepare data, train the three models, generate, evaluate.

Exit codes: 0 success, 1 user/config error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import ddgan, evaluation, seq_vae
from .checkpoints import TOOL_VERSION, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_hash, load_config
from .diffusion_core import make_schedule
from .errors import (ConfigError, EmodiffError, EmptyClipError,
                     TrainingDivergedError)
from .midi_io import parse_midi, tokens_to_midi
from .music_data import (TASK_CLASS_NAMES, Dataset, LabeledClip, Task,
                         dataset_from_clips, extract_monophonic, load_dataset,
                         load_emopia_labels, save_dataset, slice_windows,
                         synth_corpus, vocab_hash)


def _load_config_applied(path) -> ExperimentConfig:
    """Load the config and apply runtime knobs (thread pinning for strict
    single-threaded determinism)."""
    cfg = load_config(path)
    if cfg.torch_threads > 0:
        torch.set_num_threads(cfg.torch_threads)
    return cfg


def _write_manifest(out_dir: Path, command: str, cfg_hash: str,
                    inputs: list[str], outputs: list[str], seed: int) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"tool": f"emodiff {TOOL_VERSION}", "command": command,
                "config_hash": cfg_hash, "seed": seed,
                "inputs": sorted(inputs), "outputs": sorted(outputs)}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _load_dataset_checked(path, cfg: ExperimentConfig) -> Dataset:
    ds = load_dataset(path)
    if ds.seq_len != cfg.seq_len or ds.vocab_hash != vocab_hash(cfg.grid, cfg.seq_len):
        raise ConfigError(f"dataset {path} (seq_len={ds.seq_len}, grid={ds.grid}) is "
                          f"incompatible with config (seq_len={cfg.seq_len}, "
                          f"grid={cfg.grid})")
    return ds


def _write_log_csv(path: Path, log: list[dict], append: bool = False) -> None:
    if not log:
        return
    keys = sorted({k for entry in log for k in entry}, key=lambda k: (k != "epoch", k))
    mode = "a" if append and path.exists() else "w"
    with open(path, mode) as fh:
        if mode == "w":
            fh.write(",".join(keys) + "\n")
        for entry in log:
            fh.write(",".join(str(entry.get(k, "")) for k in keys) + "\n")


# ----------------------------------------------------------------------
# prepare
# ----------------------------------------------------------------------

def cmd_prepare(args) -> int:
    cfg = _load_config_applied(args.config)
    out_dir = Path(args.out)
    if args.source == "synthetic":
        clips = synth_corpus(args.n, cfg.seed, cfg.seq_len, cfg.grid)
        inputs = [f"synthetic(n={args.n}, seed={cfg.seed})"]
    else:
        if not args.in_dir:
            raise ConfigError("--source emopia requires --in DIR")
        clips, inputs = _ingest_emopia(Path(args.in_dir), cfg)
    if not clips:
        raise EmptyClipError("zero usable clips; nothing to write")
    ds = dataset_from_clips(clips)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds_path = out_dir / "dataset.npz"
    save_dataset(ds_path, ds)
    print(f"wrote {ds_path} with {len(ds)} clips")
    for name, count in ds.class_counts(Task.FOUR_Q).items():
        print(f"  {name}: {count}")
    task = Task(cfg.task)
    if task is not Task.FOUR_Q:
        for name, count in ds.class_counts(task).items():
            print(f"  {name} ({task.value}): {count}")
    _write_manifest(out_dir, "prepare", config_hash(cfg), inputs, [str(ds_path)], cfg.seed)
    return 0


def _ingest_emopia(in_dir: Path, cfg: ExperimentConfig) -> tuple[list[LabeledClip], list[str]]:
    if not in_dir.is_dir():
        raise ConfigError(f"input directory not found: {in_dir}")
    labels_path = in_dir / "labels.csv"
    if not labels_path.is_file():
        raise ConfigError(f"missing label CSV at expected path {labels_path}")
    rows, row_errors = load_emopia_labels(labels_path)
    for _, message in row_errors:
        print(f"label error: {message}", file=sys.stderr)
    clips: list[LabeledClip] = []
    inputs = [str(labels_path)]
    for row in rows:
        midi_path = in_dir / f"{row.clip_id}.mid"
        if not midi_path.is_file():
            print(f"skipping {row.clip_id}: no file {midi_path}", file=sys.stderr)
            continue
        inputs.append(str(midi_path))
        try:
            notes = parse_midi(midi_path.read_bytes(), grid=cfg.grid)
        except EmodiffError as exc:
            print(f"skipping {row.clip_id}: {exc}", file=sys.stderr)
            continue
        for w, window in enumerate(slice_windows(notes, cfg.seq_len)):
            try:
                seq = extract_monophonic(window, cfg.seq_len, cfg.grid)
            except EmptyClipError:
                continue
            clips.append(LabeledClip(seq, row.quadrant, f"{row.clip_id}_w{w:03d}"))
    return clips, inputs


# ----------------------------------------------------------------------
# training commands
# ----------------------------------------------------------------------

def cmd_train_vae(args) -> int:
    cfg = _load_config_applied(args.config)
    ds = _load_dataset_checked(args.data, cfg)
    vae_config = seq_vae.VaeConfig(
        latent_dim=cfg.latent_dim, hidden=cfg.vae_hidden, emb_dim=cfg.vae_emb_dim,
        seq_len=cfg.seq_len, kl_weight=cfg.vae_kl_weight, lr=cfg.vae_lr,
        epochs=cfg.vae_epochs, batch_size=cfg.vae_batch_size, seed=cfg.seed)
    init_state, start_epoch = None, 0
    if args.resume:
        blob = load_checkpoint(args.resume, "vae", config_hash(cfg))
        init_state = blob["payload"]["state"]
        start_epoch = int(blob["payload"].get("epoch", 0))
    model, log = seq_vae.train_vae(ds.tokens, vae_config, init_state, start_epoch)
    payload = seq_vae.vae_payload(model)
    payload["epoch"] = vae_config.epochs
    payload["vocab_hash"] = ds.vocab_hash
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, "vae", payload, config_hash(cfg))
    _write_log_csv(out.with_suffix(".log.csv"), log, append=bool(args.resume))
    final = log[-1] if log else {}
    print(f"wrote {out} (recon={final.get('recon', float('nan')):.4f}, "
          f"token_acc={final.get('token_acc', float('nan')):.4f})")
    _write_manifest(out.parent, "train-vae", config_hash(cfg), [str(args.data)],
                    [str(out)], cfg.seed)
    return 0


def _load_vae(path, cfg: ExperimentConfig) -> seq_vae.SequenceVae:
    blob = load_checkpoint(path, "vae", config_hash(cfg))
    model = seq_vae.vae_from_payload(blob["payload"])
    if model.config.seq_len != cfg.seq_len:
        raise ConfigError(f"VAE checkpoint seq_len {model.config.seq_len} != "
                          f"config {cfg.seq_len}")
    if blob["payload"].get("vocab_hash") not in (None, vocab_hash(cfg.grid, cfg.seq_len)):
        raise ConfigError("VAE checkpoint vocabulary differs from the active config")
    return model


def _encode_corpus(model: seq_vae.SequenceVae, ds: Dataset,
                   batch: int = 256) -> torch.Tensor:
    parts = [seq_vae.encode(model, ds.tokens[i:i + batch], deterministic=True)
             for i in range(0, len(ds), batch)]
    return torch.cat(parts)


def cmd_train_ddgan(args) -> int:
    cfg = _load_config_applied(args.config)
    ds = _load_dataset_checked(args.data, cfg)
    vae = _load_vae(args.vae, cfg)
    task = Task(cfg.task)
    latents = _encode_corpus(vae, ds)
    class_ids = ds.class_ids(task)
    schedule = make_schedule(cfg.T, cfg.beta_min, cfg.beta_max)
    train_config = ddgan.TrainConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size, lr_g=cfg.lr_g, lr_d=cfg.lr_d,
        adam_beta1=cfg.adam_beta1, adam_beta2=cfg.adam_beta2, r1_gamma=cfg.r1_gamma,
        z_dim=cfg.z_dim, emb_dim=cfg.emb_dim, hidden=cfg.gen_hidden,
        depth=cfg.gen_depth, fd_every=cfg.fd_every, seed=cfg.seed)
    resume_payload = None
    if args.resume:
        blob = load_checkpoint(args.resume, "ddgan", config_hash(cfg))
        if blob["task"] != task.value:
            raise ConfigError(f"resume checkpoint task {blob['task']!r} != {task.value!r}")
        resume_payload = blob["payload"]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        result = ddgan.train(latents, class_ids, len(TASK_CLASS_NAMES[task]),
                             schedule, train_config, resume=resume_payload)
    except TrainingDivergedError as exc:
        if exc.last_state is not None:
            exc.last_state["task"] = task.value
            save_checkpoint(out, "ddgan", exc.last_state, config_hash(cfg), task.value)
            print(f"training diverged; kept last finite checkpoint at {out}",
                  file=sys.stderr)
        raise
    payload = result.resume_payload or ddgan.ddgan_payload(
        result, schedule, task.value, len(TASK_CLASS_NAMES[task]), train_config)
    payload["task"] = task.value
    save_checkpoint(out, "ddgan", payload, config_hash(cfg), task.value)
    _write_log_csv(out.with_suffix(".log.csv"), result.log, append=bool(args.resume))
    final = result.log[-1] if result.log else {}
    print(f"wrote {out} (epoch={result.epoch}, d_loss={final.get('d_loss', float('nan')):.4f}, "
          f"g_loss={final.get('g_loss', float('nan')):.4f})")
    _write_manifest(out.parent, "train-ddgan", config_hash(cfg),
                    [str(args.data), str(args.vae)], [str(out)], cfg.seed)
    return 0


def cmd_train_classifier(args) -> int:
    cfg = _load_config_applied(args.config)
    ds = _load_dataset_checked(args.data, cfg)
    task = Task(cfg.task)
    clf_config = evaluation.ClassifierConfig(
        n_classes=len(TASK_CLASS_NAMES[task]), hidden=cfg.clf_hidden,
        lr=cfg.clf_lr, epochs=cfg.clf_epochs, batch_size=cfg.clf_batch_size,
        seed=cfg.seed)
    init_state, start_epoch = None, 0
    if args.resume:
        blob = load_checkpoint(args.resume, "classifier", config_hash(cfg))
        init_state = blob["payload"]["state"]
        start_epoch = int(blob["payload"].get("epoch", 0))
    model, heldout_acc, log = evaluation.train_classifier(
        ds.tokens, ds.class_ids(task), clf_config, init_state, start_epoch)
    payload = evaluation.classifier_payload(model)
    payload["epoch"] = clf_config.epochs
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, "classifier", payload, config_hash(cfg), task.value)
    _write_log_csv(out.with_suffix(".log.csv"), log, append=bool(args.resume))
    print(f"wrote {out} (held-out accuracy {heldout_acc:.3f})")
    _write_manifest(out.parent, "train-classifier", config_hash(cfg),
                    [str(args.data)], [str(out)], cfg.seed)
    return 0


# ----------------------------------------------------------------------
# generate / evaluate
# ----------------------------------------------------------------------

def _load_ddgan(path, cfg: ExperimentConfig):
    blob = load_checkpoint(path, "ddgan", config_hash(cfg))
    result, schedule = ddgan.ddgan_from_payload(blob["payload"])
    return result, schedule, blob["task"]


def cmd_generate(args) -> int:
    cfg = _load_config_applied(args.config)
    gan, schedule, ckpt_task = _load_ddgan(args.ckpt, cfg)
    vae = _load_vae(args.vae, cfg)
    task = Task(ckpt_task)
    valid = TASK_CLASS_NAMES[task]
    if args.emotion not in valid:
        raise ConfigError(f"emotion {args.emotion!r} unknown for task {task.value}; "
                          f"valid labels: {', '.join(valid)}")
    class_id = valid.index(args.emotion)
    seed = cfg.seed if args.seed is None else args.seed
    tempo = cfg.tempo_bpm if args.tempo is None else args.tempo
    if args.n < 1:
        raise ConfigError("--n must be >= 1")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.steps_dump:
        latents, trajectory = ddgan.sample(args.n, class_id, gan.generator, schedule,
                                           gan.scaler, seed=seed, keep_trajectory=True)
        dump = {f"t{t}": x.numpy() for t, x in trajectory}
        np.savez(out_dir / f"{args.emotion}_steps.npz", **dump)
    else:
        latents = ddgan.sample(args.n, class_id, gan.generator, schedule, gan.scaler,
                               seed=seed)
    seqs = seq_vae.decode(vae, latents, greedy=True)
    outputs = []
    for i, seq in enumerate(seqs):
        path = out_dir / f"{args.emotion}_{i:03d}.mid"
        path.write_bytes(tokens_to_midi(seq.tokens, grid=cfg.grid, tempo_bpm=tempo))
        outputs.append(str(path))
    print(f"wrote {len(outputs)} MIDI files to {out_dir}")
    _write_manifest(out_dir, "generate", config_hash(cfg),
                    [str(args.ckpt), str(args.vae)], outputs, seed)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config_applied(args.config)
    if args.n_per_class < 1:
        raise ConfigError("--n-per-class must be >= 1")
    gan, schedule, ckpt_task = _load_ddgan(args.ckpt, cfg)
    vae = _load_vae(args.vae, cfg)
    clf_blob = load_checkpoint(args.clf, "classifier", config_hash(cfg))
    task = Task(args.task)
    if ckpt_task != task.value:
        raise ConfigError(f"DDGAN checkpoint task {ckpt_task!r} != requested {task.value!r}")
    if clf_blob["task"] != task.value:
        raise ConfigError(f"classifier checkpoint task {clf_blob['task']!r} != "
                          f"requested {task.value!r}")
    clf = evaluation.classifier_from_payload(clf_blob["payload"])
    ds = _load_dataset_checked(args.data, cfg)

    report = evaluation.control_accuracy(gan, schedule, vae, clf, task,
                                         args.n_per_class, seed=cfg.seed)
    real_latents = _encode_corpus(vae, ds).numpy()
    curve_n = min(args.n_per_class * len(TASK_CLASS_NAMES[task]), args.curve_n)
    report.per_step = evaluation.per_step_curve(gan, schedule, real_latents, curve_n,
                                                seed=cfg.seed)
    names = TASK_CLASS_NAMES[task]
    gen_sets = [ddgan.sample(max(2, curve_n // len(names)), c, gan.generator,
                             schedule, gan.scaler, seed=cfg.seed).numpy()
                for c in range(len(names))]
    projections = evaluation.projection_csv([real_latents, *gen_sets],
                                            ["real", *names])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(report.to_text())
    (out_dir / "confusion.csv").write_text(report.confusion_csv())
    (out_dir / "per_step.csv").write_text(report.per_step_csv())
    (out_dir / "projection_2d.csv").write_text(projections)
    print(f"denoising steps: {schedule.T}")
    print(f"overall control accuracy: {report.overall_accuracy:.3f}")
    print(f"report written to {out_dir}")
    _write_manifest(out_dir, "evaluate", config_hash(cfg),
                    [str(args.ckpt), str(args.vae), str(args.clf), str(args.data)],
                    [str(out_dir / "report.txt"), str(out_dir / "confusion.csv"),
                     str(out_dir / "per_step.csv"),
                     str(out_dir / "projection_2d.csv")], cfg.seed)
    return 0


# ----------------------------------------------------------------------
# parser / entry point
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emodiff",
        description="Emotion-conditioned symbolic music generation with a "
                    "few-step latent diffusion GAN")
    parser.add_argument("--version", action="version", version=f"emodiff {TOOL_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="tokenize a corpus into a dataset file")
    p.add_argument("--source", choices=["emopia", "synthetic"], required=True)
    p.add_argument("--in", dest="in_dir", help="directory with MIDI files + labels.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--n", type=int, default=2000, help="synthetic corpus size")
    p.set_defaults(func=cmd_prepare)

    for name, func, needs_vae in (("train-vae", cmd_train_vae, False),
                                  ("train-ddgan", cmd_train_ddgan, True),
                                  ("train-classifier", cmd_train_classifier, False)):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} on a prepared dataset")
        p.add_argument("--config", required=True)
        p.add_argument("--data", required=True, help="dataset .npz from prepare")
        if needs_vae:
            p.add_argument("--vae", required=True, help="VAE checkpoint")
        p.add_argument("--out", required=True, help="checkpoint path to write")
        p.add_argument("--resume", help="checkpoint to continue from")
        p.set_defaults(func=func)

    p = sub.add_parser("generate", help="sample conditional melodies to MIDI")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True, help="DDGAN checkpoint")
    p.add_argument("--vae", required=True, help="VAE checkpoint")
    p.add_argument("--emotion", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tempo", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps-dump", action="store_true",
                   help="also save per-step denoising latents")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="control accuracy and per-step FD/MMD report")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--clf", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=[t.value for t in Task], required=True)
    p.add_argument("--n-per-class", type=int, required=True)
    p.add_argument("--curve-n", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, EmodiffError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:   # pragma: no cover - unexpected failure
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
