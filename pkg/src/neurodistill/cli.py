"""Command-line pipeline: gen, preprocess, pretrain, finetune, distill,
msdistill, eval.

Every command reads one JSON run config (--config), honors --seed and
--out overrides, writes the fully resolved config next to its outputs,
and is reproducible byte for byte from that pair. Exit codes: 0 success,
2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import config as cfgmod
from . import container, metrics, preprocess, report, synthgen, training
from . import numkit as nk

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def worker_count(n_jobs):
    """Parallel workers for independent jobs, capped by NEURODISTILL_THREADS."""
    cap = os.environ.get("NEURODISTILL_THREADS")
    try:
        cap = int(cap) if cap else (os.cpu_count() or 1)
    except ValueError:
        raise UsageError(f"NEURODISTILL_THREADS must be an integer, got {cap!r}")
    return max(1, min(n_jobs, cap))


def _claim_out_dir(path, force):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise DataError(f"output dir {path!r} is not empty; pass --force to overwrite")
    os.makedirs(path, exist_ok=True)


class _RawSession:
    """Container arrays exposed with SyntheticSession's attribute names."""

    def __init__(self, manifest, arrays):
        self.session_id = manifest["session_id"]
        self.seq_len = manifest.get("seq_len") or 0
        self.spikes = arrays["spikes"]
        self.lfp = arrays["lfp"]
        self.behavior = arrays["behavior"]
        self.true_latents = arrays.get("true_latents")


def load_records(cfg, session_ids=None):
    """Dataset dir -> SessionRecords (z-scored on their train split)."""
    try:
        index, loaded = container.read_dataset(cfg.data_dir)
    except FileNotFoundError as e:
        raise DataError(f"dataset not found under {cfg.data_dir!r}: {e}")
    by_id = {m["session_id"]: (m, arrays) for m, arrays, _ in loaded}
    wanted = session_ids or cfg.sessions or index["sessions"]
    records = []
    for sid in wanted:
        if sid not in by_id:
            raise DataError(f"session {sid!r} not in dataset {cfg.data_dir!r}")
        manifest, arrays = by_id[sid]
        raw = _RawSession(manifest, arrays)
        seq_len = raw.seq_len or cfg.gen.seq_len
        records.append(
            preprocess.prepare_session(
                raw, seq_len_bins=seq_len, train_frac=cfg.train_frac,
                split_seed=cfg.split_seed,
            )
        )
    return records


def build_model(cfg, records, modality, seed):
    tok = cfg.tokenizer.build(cfg.encoder.d, init_seed=seed)
    model = training.Model(dataclasses.replace(cfg.encoder), tok, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
    for r in records:
        n = training.session_input(r, modality).shape[-1]
        kw = {"n_spike_dims": r.spikes.shape[-1]} if modality == "mm" else {}
        model.register_session(r.session_id, n, modality, rng, **kw)
    return model


def _register_missing(model, records, modality, seed):
    """Fresh space embeddings for sessions a loaded checkpoint has not seen."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    fresh = []
    for r in records:
        if (r.session_id, modality) not in model.tokenizer.sessions:
            n = training.session_input(r, modality).shape[-1]
            kw = {"n_spike_dims": r.spikes.shape[-1]} if modality == "mm" else {}
            model.register_session(r.session_id, n, modality, rng, **kw)
            fresh.append(r.session_id)
    return fresh


def _finish_run(out_dir, cfg, model, result, label):
    ckpt = os.path.join(out_dir, "checkpoint.ckpt")
    training.save_model(
        ckpt, model, train_cfg=cfg.train,
        extra_meta={"best_epoch": result.best_epoch, "best_val": result.best_val},
    )
    cfgmod.write_resolved(out_dir, cfg)
    print(f"{label}: {result.epochs_run} epochs, best val {result.best_val:.6g} "
          f"(epoch {result.best_epoch}) -> {ckpt}")
    if result.diverged:
        print("training diverged; checkpoint holds the last good parameters",
              file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _train_command(cfg, args, objective, teacher=None, init=None):
    cfg.train.objective = objective
    if args.out:
        cfg.out_dir = args.out
    _claim_out_dir(cfg.out_dir, args.force)
    records = load_records(cfg)
    if init:
        model, _ = training.load_model(init)
        fresh = _register_missing(model, records, cfg.train.modality, cfg.train.seed)
        if fresh:
            print(f"registered fresh space embeddings for {fresh}")
    else:
        model = build_model(cfg, records, cfg.train.modality, cfg.train.seed)
    log = os.path.join(cfg.out_dir, "train_log.tsv")
    result = training.run_training(model, records, cfg.train, teacher=teacher, log_path=log)
    return _finish_run(cfg.out_dir, cfg, model, result, objective)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg, args):
    if args.seed is not None:
        cfg.gen.seed = args.seed
    out = args.out or cfg.data_dir
    cfg.data_dir = out
    _claim_out_dir(out, args.force)
    sessions, manifest = synthgen.generate_dataset(cfg.gen)
    container.write_dataset(out, sessions, manifest)
    cfgmod.write_resolved(out, cfg)
    print(f"wrote {len(sessions)} sessions to {out}")
    return EXIT_OK


def cmd_preprocess(cfg, args):
    if not args.input:
        raise UsageError("preprocess requires --input (npz with broadband/fs/unit_*)")
    out = args.out or cfg.out_dir
    _claim_out_dir(out, args.force)
    with np.load(args.input) as z:
        if "broadband" not in z or "fs" not in z:
            raise DataError("input npz needs 'broadband' [T,C] and scalar 'fs'")
        rec = preprocess.BroadbandRecording(
            samples=np.asarray(z["broadband"], dtype=np.float64),
            sample_rate=float(z["fs"]),
        )
        unit_keys = sorted(k for k in z.files if k.startswith("unit_"))
        spike_times = [np.asarray(z[k], dtype=np.float64) for k in unit_keys]
        behavior = np.asarray(z["behavior"], dtype=np.float64) if "behavior" in z.files else None

    spec = preprocess.FilterSpec()
    lfp = preprocess.broadband_to_lfp(rec, spec)
    duration = rec.samples.shape[0] / rec.sample_rate
    bin_ms = 1000.0 / spec.target_rate
    counts, kept = preprocess.bin_spikes(spike_times, duration, bin_ms=bin_ms)
    n_t = min(lfp.shape[0], counts.shape[0])
    if behavior is None:
        raise DataError("input npz lacks 'behavior'; decoding targets are required")
    n_t = min(n_t, behavior.shape[0])

    seq_len = cfg.gen.seq_len
    n_t = (n_t // seq_len) * seq_len
    if n_t == 0:
        raise DataError(f"recording shorter than one {seq_len}-bin sequence")
    sid = os.path.splitext(os.path.basename(args.input))[0]
    raw = _RawSession(
        {"session_id": sid, "seq_len": seq_len},
        {
            "spikes": counts[:n_t].astype(np.uint8),
            "lfp": lfp[:n_t].astype(np.float32),
            "behavior": behavior[:n_t].astype(np.float32),
        },
    )
    sdir = os.path.join(out, sid)
    container.write_session_container(sdir, raw, bin_ms=bin_ms)
    n_seq = n_t // seq_len
    train_idx, test_idx = preprocess.split_sequences(n_seq, cfg.train_frac, cfg.split_seed)
    with open(os.path.join(sdir, "splits.json"), "w") as f:
        json.dump({"train": train_idx.tolist(), "test": test_idx.tolist()}, f, sort_keys=True)
    index = {"schema_version": container.SCHEMA_VERSION, "generator": None, "sessions": [sid]}
    with open(os.path.join(out, "index.json"), "wb") as f:
        f.write(json.dumps(index, sort_keys=True, separators=(",", ":")).encode())
    cfgmod.write_resolved(out, cfg)
    print(f"preprocessed {sid}: {counts.shape[1]} units kept ({len(spike_times)} in), "
          f"{lfp.shape[1]} lfp channels, {n_seq} sequences -> {sdir}")
    return EXIT_OK


def cmd_pretrain(cfg, args):
    if args.seed is not None:
        cfg.train.seed = args.seed
    return _train_command(cfg, args, "mae")


REGIME_TO_OBJECTIVE = {"unsup": "mae", "sup": "sup", "fullsup": "fullsup"}


def cmd_finetune(cfg, args):
    if not args.init:
        raise UsageError("finetune requires --init CHECKPOINT")
    if args.seed is not None:
        cfg.train.seed = args.seed
    objective = REGIME_TO_OBJECTIVE[args.regime or "unsup"]
    return _train_command(cfg, args, objective, init=args.init)


def _distill(cfg, args):
    if not args.teacher:
        raise UsageError("distill requires --teacher CHECKPOINT")
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.unfreeze_epoch is not None:
        cfg.train.unfreeze_epoch = args.unfreeze_epoch
    teacher, _ = training.load_teacher(args.teacher)
    records = load_records(cfg)
    missing = [
        r.session_id for r in records
        if (r.session_id, "spikes") not in teacher.model.tokenizer.sessions
    ]
    if missing:
        if args.adapt_teacher_epochs:
            rng = np.random.default_rng(np.random.SeedSequence([cfg.train.seed, 37]))
            for r in records:
                if r.session_id in missing:
                    teacher.model.register_session(
                        r.session_id, r.spikes.shape[-1], "spikes", rng
                    )
            training.adapt_session_embeddings(
                teacher.model, [r for r in records if r.session_id in missing],
                epochs=args.adapt_teacher_epochs, seed=cfg.train.seed,
                batch_size=cfg.train.batch_size,
            )
        else:
            raise DataError(
                f"teacher has no spike embeddings for {missing}; "
                "rerun with --adapt-teacher-epochs N to fit them"
            )
    objective = "distill_sup" if args.regime == "sup" else "distill"
    return _train_command(cfg, args, objective, teacher=teacher, init=args.init)


def cmd_distill(cfg, args):
    return _distill(cfg, args)


def cmd_msdistill(cfg, args):
    # multi-session distillation: same objective, sessions pooled via config
    return _distill(cfg, args)


# ---------------------------------------------------------------------------
# eval


def _session_modality(model, sid, zero_spikes):
    mods = [m for (s, m) in model.tokenizer.sessions if s == sid]
    if not mods:
        raise DataError(f"checkpoint has no embeddings for session {sid!r}")
    if zero_spikes:
        if "mm" not in mods:
            raise DataError(f"--zero-spikes needs a multimodal session, {sid} has {mods}")
        return "mm"
    return sorted(mods)[0]


def _encode_split(model, record, idx, zero_spikes, batch=16):
    sid = record.session_id
    mod = _session_modality(model, sid, zero_spikes)
    x = training.session_input(record, mod)[idx]
    outs = []
    with nk.no_grad():
        for k in range(0, x.shape[0], batch):
            chunk = x[k : k + batch]
            if zero_spikes and mod == "mm":
                rep = model.zero_spike_forward(chunk, sid)
            else:
                rep = model.encode(chunk, sid, mod)
            outs.append(rep.pooled.data.astype(np.float64))
    return np.concatenate(outs, axis=0)  # [n_seq, T, d]


def _eval_one_model(name, path, records, cfg, zero_spikes):
    model, _ = training.load_model(path)
    rows = []
    reps = {}
    flat = {}
    for r in records:
        train_r = _encode_split(model, r, r.train_idx, zero_spikes)
        test_r = _encode_split(model, r, r.test_idx, zero_spikes)
        r2 = metrics.decode_r2(
            metrics.flatten_timesteps(train_r),
            r.behavior[r.train_idx].reshape(-1, r.behavior.shape[-1]),
            metrics.flatten_timesteps(test_r),
            r.behavior[r.test_idx].reshape(-1, r.behavior.shape[-1]),
        )
        rows.append([name, r.session_id, float(r2), len(r.train_idx), len(r.test_idx)])
        reps[r.session_id] = metrics.pool_sequences(test_r)
        flat[r.session_id] = metrics.flatten_timesteps(test_r)
    return rows, reps, flat


def cmd_eval(cfg, args):
    if not args.checkpoints:
        raise UsageError("eval requires at least one checkpoint path")
    out = args.out or cfg.out_dir
    _claim_out_dir(out, args.force)
    seed = args.seed if args.seed is not None else cfg.train.seed
    records = load_records(cfg)

    names = []
    for p in args.checkpoints:
        base = os.path.splitext(os.path.basename(p))[0]
        name = base
        k = 2
        while name in names:
            name = f"{base}_{k}"
            k += 1
        names.append(name)

    jobs = list(zip(names, args.checkpoints))
    workers = worker_count(len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(lambda j: _eval_one_model(j[0], j[1], records, cfg, args.zero_spikes), jobs)
            )
    else:
        results = [_eval_one_model(n, p, records, cfg, args.zero_spikes) for n, p in jobs]

    decode_rows = []
    model_reps = {}
    model_flat = {}
    for (name, _), (rows, reps, flat) in zip(jobs, results):
        decode_rows.extend(rows)
        model_reps[name] = reps
        model_flat[name] = flat

    # oracle reference: decode straight from the generator's true latents
    for r in records:
        if r.true_latents is None:
            continue
        tr = r.true_latents[r.train_idx].reshape(-1, r.true_latents.shape[-1])
        te = r.true_latents[r.test_idx].reshape(-1, r.true_latents.shape[-1])
        r2 = metrics.decode_r2(
            tr, r.behavior[r.train_idx].reshape(-1, r.behavior.shape[-1]),
            te, r.behavior[r.test_idx].reshape(-1, r.behavior.shape[-1]),
        )
        decode_rows.append(["oracle:latents", r.session_id, float(r2),
                            len(r.train_idx), len(r.test_idx)])

    report.write_tsv(
        os.path.join(out, "decode.tsv"),
        ["model", "session", "r2", "n_train_seq", "n_test_seq"],
        decode_rows,
    )

    # per-session mean and spread across the supplied checkpoints (seeds)
    summary_rows = []
    for sid in [r.session_id for r in records]:
        vals = [row[2] for row in decode_rows if row[1] == sid and row[0] != "oracle:latents"]
        if vals:
            summary_rows.append(
                [sid, len(vals), float(np.mean(vals)), float(np.std(vals))]
            )
    report.write_tsv(
        os.path.join(out, "summary.tsv"),
        ["session", "n_models", "r2_mean", "r2_std"],
        summary_rows,
    )

    # retrieval and CKA compare representations timestep-by-timestep: each
    # time bin of every test sequence is one query against the teacher's
    # bins, which is what a paired-recording alignment actually promises
    retrieval_rows, cka_rows = [], []
    if args.teacher:
        teacher, _ = training.load_teacher(args.teacher)
        t_reps = {}
        for r in records:
            pooled = _encode_split(teacher.model, r, r.test_idx, zero_spikes=False)
            t_reps[r.session_id] = metrics.flatten_timesteps(pooled)
        for name in model_flat:
            pair = f"{name}|teacher"
            t_all, s_all = [], []
            for sid, s_rep in model_flat[name].items():
                res = metrics.retrieval_metrics(s_rep, t_reps[sid])
                retrieval_rows.append(
                    [pair, sid, res["top1"], res["top5"], res["mean_rank"],
                     res["n"], res["n_ties"]]
                )
                cka_rows.append([pair, sid, metrics.linear_cka(s_rep, t_reps[sid])])
                s_all.append(s_rep)
                t_all.append(t_reps[sid])
            s_cat, t_cat = np.concatenate(s_all), np.concatenate(t_all)
            res = metrics.retrieval_metrics(s_cat, t_cat)
            retrieval_rows.append(
                [pair, "ALL", res["top1"], res["top5"], res["mean_rank"],
                 res["n"], res["n_ties"]]
            )
            cka_rows.append([pair, "ALL", metrics.linear_cka(s_cat, t_cat)])
            n, d = s_cat.shape
            rng = np.random.default_rng(np.random.SeedSequence([seed, 41]))
            rand_a, rand_b = rng.normal(size=(n, d)), rng.normal(size=(n, d))
            res = metrics.retrieval_metrics(rand_a, rand_b)
            retrieval_rows.append(
                ["random", "ALL", res["top1"], res["top5"], res["mean_rank"],
                 res["n"], res["n_ties"]]
            )
            cka_rows.append(["random", "ALL", metrics.linear_cka(rand_a, rand_b)])
        report.write_tsv(
            os.path.join(out, "retrieval.tsv"),
            ["pair", "session", "top1", "top5", "mean_rank", "n", "n_ties"],
            retrieval_rows,
        )
        report.write_tsv(
            os.path.join(out, "cka.tsv"),
            ["pair", "session", "cka"],
            cka_rows,
            notes=[report.CKA_NOTE],
        )

    dump = {}
    for name, reps in model_reps.items():
        for sid, arr in reps.items():
            dump[f"{name}/{sid}/test_pooled"] = arr.astype(np.float32)
    container.save_checkpoint(
        os.path.join(out, "representations.ckpt"), dump,
        meta={"split": "test", "pooling": "sequence-mean"},
    )

    figdir = os.path.join(out, "figures")
    os.makedirs(figdir, exist_ok=True)
    report.decode_figure(figdir, [(r[0], r[1], r[2]) for r in decode_rows])
    if retrieval_rows:
        report.retrieval_figure(
            figdir, [(r[0], r[1], r[2], r[3], r[4]) for r in retrieval_rows]
        )
        report.cka_figure(figdir, [(r[0], r[1], r[2]) for r in cka_rows])
    cfgmod.write_resolved(out, cfg)
    print(f"eval: {len(decode_rows)} decode rows, {len(retrieval_rows)} retrieval rows -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring


def _add_common(p):
    p.add_argument("--config", help="run config JSON; defaults apply if omitted")
    p.add_argument("--seed", type=int, default=None, help="override the command's seed")
    p.add_argument("--out", default=None, help="override the output directory")
    p.add_argument("--force", action="store_true", help="overwrite non-empty output dirs")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="neurodistill",
        description="cross-modal distillation of spike transformers into LFP models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic paired-modality dataset")
    _add_common(p)

    p = sub.add_parser("preprocess", help="broadband npz -> session container")
    _add_common(p)
    p.add_argument("--input", help="npz with broadband [T,C], fs, unit_* spike times, behavior")

    p = sub.add_parser("pretrain", help="masked-autoencoder pretraining")
    _add_common(p)

    p = sub.add_parser("finetune", help="continue training a checkpoint")
    _add_common(p)
    p.add_argument("--init", help="checkpoint to start from (required)")
    p.add_argument("--regime", choices=["unsup", "sup", "fullsup"], default="unsup")

    for cmd, blurb in (
        ("distill", "align an LFP student to a spike teacher"),
        ("msdistill", "multi-session distillation across pooled sessions"),
    ):
        p = sub.add_parser(cmd, help=blurb)
        _add_common(p)
        p.add_argument("--teacher", help="teacher checkpoint (required)")
        p.add_argument("--init", help="optional student checkpoint to warm-start")
        p.add_argument("--regime", choices=["unsup", "sup"], default="unsup",
                       help="sup adds behavior loss in place of reconstruction")
        p.add_argument("--unfreeze-epoch", type=int, default=None,
                       help="epoch at which the teacher becomes trainable")
        p.add_argument("--adapt-teacher-epochs", type=int, default=0,
                       help="fit missing teacher space embeddings for N epochs")

    p = sub.add_parser("eval", help="decode R^2, retrieval, CKA reports")
    _add_common(p)
    p.add_argument("checkpoints", nargs="*", help="model checkpoints to evaluate")
    p.add_argument("--teacher", help="teacher checkpoint for retrieval/CKA")
    p.add_argument("--zero-spikes", action="store_true",
                   help="evaluate multimodal sessions with spike dims zeroed")

    return parser


COMMANDS = {
    "gen": cmd_gen,
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "distill": cmd_distill,
    "msdistill": cmd_msdistill,
    "eval": cmd_eval,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if e.code is not None else EXIT_USAGE
    try:
        cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig().validate()
        return COMMANDS[args.command](cfg, args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, ZeroDivisionError, np.linalg.LinAlgError, RuntimeError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
