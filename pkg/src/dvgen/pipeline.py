"""The batch pipeline behind the command line: data, train, generate, evaluate, report.

Every stage reads and writes plain files (INI, CSV, P5 graymaps, one binary
checkpoint) and is deterministic given the run seed.

Directory layouts::

    data/     config.ini, manifest.csv, {train,val,test}/ep_00000/{frame_0000.pgm, ..., labels.csv}
    run/      model.ckpt, train_log.csv
    traces/   config.ini, manifest.csv, ctx_0000/trace_000/{frames.pgm, latents.csv,
              variance.csv, switches.csv}
    report/   curves.csv, best_of_k.csv, summary.csv, transitions_10-25.csv, ...
    compare/  comparison.csv, curves_plot.csv
"""
from __future__ import annotations

import csv
import io
import logging
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_mod
from . import dvg, metrics
from .errors import DataError
from .runconfig import SPLITS, RunConfig, load_config
from .synthdata import (_atomic_write_bytes, classify_frames, generate_episode, load_episode,
                        read_pgm_stream, save_episode, write_pgm_stream)

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ("split", "index", "seed", "path")
TRACE_HEADER = ("context_id", "episode", "context_action", "trace_id", "seed", "mode", "switches", "path")


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode("utf-8")


def _read_csv(path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def episode_seed(run_seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([int(run_seed), SPLITS.index(split), int(index)])
    return int(ss.generate_state(1)[0])


# -- gen-data ----------------------------------------------------------------

def gen_data(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    walker = cfg.walker()
    rows = []
    for split in SPLITS:
        for i in range(cfg[f"data.n_{split}"]):
            seed = episode_seed(cfg.seed, split, i)
            rel = f"{split}/ep_{i:05d}"
            save_episode(generate_episode(walker, seed), out / rel, walker)
            rows.append((split, i, seed, rel))
    _atomic_write_bytes(out / "config.ini", cfg.to_ini().encode("utf-8"))
    _atomic_write_bytes(out / "manifest.csv", _csv_bytes(MANIFEST_HEADER, rows))
    return out


def dataset_config(data_dir) -> RunConfig:
    path = Path(data_dir) / "config.ini"
    if not path.exists():
        raise DataError(f"{data_dir} has no config.ini; is it a dataset directory?")
    return load_config(path)


def load_split(data_dir, split: str, limit: int | None = None):
    """Episodes of one split, in manifest order."""
    data_dir = Path(data_dir)
    walker = dataset_config(data_dir).walker()
    rows = [r for r in _read_csv(data_dir / "manifest.csv") if r["split"] == split]
    if limit:
        rows = rows[:limit]
    return [load_episode(data_dir / r["path"], walker) for r in rows], walker


# -- train -------------------------------------------------------------------

LOG_HEADER = ("epoch", "total") + dvg.COMPONENTS


def initial_model(cfg: RunConfig, frames) -> dvg.DvgModel:
    """Freshly initialised model for ``cfg``, including the data-dependent start."""
    tc = cfg.train()
    return dvg.DvgModel(cfg.model()).init_from_data(frames, tc.clip_length, seed=tc.seed)


def train(cfg: RunConfig, data_dir, run_dir, resume=None) -> Path:
    """Train (or continue training) and write ``model.ckpt`` and ``train_log.csv``.

    With ``resume`` the model, optimizer state and epoch counter come from
    that checkpoint and training continues up to ``train.epochs``.
    """
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    episodes, _ = load_split(data_dir, "train")
    if not episodes:
        raise DataError(f"{data_dir} has no training episodes")
    frames = np.stack([e.frames for e in episodes])
    tc = cfg.train()
    old_rows = []
    if resume is not None:
        ck = ckpt_mod.load(resume)
        model, opt_state, start = ck.build_model(), ck.adam, ck.epochs_done
        log_path = run / "train_log.csv"
        if log_path.exists():
            old_rows = [tuple(r[k] for k in LOG_HEADER) for r in _read_csv(log_path)
                        if int(r["epoch"]) < start]
    else:
        model, opt_state, start = initial_model(cfg, frames), None, 0
    model, log, opt_state = dvg.train_resumable(model, frames, tc, opt_state=opt_state,
                                                start_epoch=start, log_every=cfg["train.log_every"])
    done = max(start, tc.epochs)
    path = run / "model.ckpt"
    ckpt_mod.save(ckpt_mod.from_model(model, cfg, opt_state, done), path)
    rows = old_rows + [(r["epoch"],) + tuple(metrics._fmt(r[k]) for k in LOG_HEADER[1:]) for r in log]
    _atomic_write_bytes(run / "train_log.csv", _csv_bytes(LOG_HEADER, rows))
    return path


# -- generate ----------------------------------------------------------------

@dataclass(frozen=True)
class _GenJob:
    context_id: int
    context: np.ndarray
    seeds: tuple


_WORKER_MODEL = None


def _worker_init(ckpt_path, trigger, horizon):
    global _WORKER_MODEL
    torch.set_num_threads(1)
    _WORKER_MODEL = (ckpt_mod.load(ckpt_path).build_model(), trigger, horizon)


def _run_job(job: _GenJob):
    model, trigger, horizon = _WORKER_MODEL
    ctx = np.repeat(job.context[None], len(job.seeds), axis=0)
    return job.context_id, dvg.generate_batch(model, ctx, horizon, trigger, job.seeds)


def generate(cfg: RunConfig, ckpt_path, data_dir, out_dir) -> Path:
    """K seeded traces per context; contexts are the first frames of dataset episodes.

    Each context's K traces are one batched rollout.  With ``generate.workers``
    above one, contexts are spread over a process pool; the output is the same
    as a single-process run.
    """
    global _WORKER_MODEL
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ck = ckpt_mod.load(ckpt_path)
    c = ck.config["train.context"]
    g = cfg.values["generate"]
    trigger, horizon, K = cfg.trigger(), g["horizon"], g["samples"]
    episodes, _ = load_split(data_dir, g["split"], g["contexts"] or None)
    for e in episodes:
        if len(e) < c:
            raise DataError(f"episode of {len(e)} frames is shorter than the {c}-frame context")
    jobs = [_GenJob(i, e.frames[:c], tuple(dvg.trace_seed(cfg.seed, i, k) for k in range(K)))
            for i, e in enumerate(episodes)]
    if g["workers"] > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(g["workers"], initializer=_worker_init,
                                 initargs=(str(ckpt_path), trigger, horizon)) as pool:
            results = dict(pool.map(_run_job, jobs))
    else:
        threads = torch.get_num_threads()
        _WORKER_MODEL = (ck.build_model(), trigger, horizon)
        torch.set_num_threads(1)    # same arithmetic as a pool worker
        try:
            results = dict(_run_job(j) for j in jobs)
        finally:
            _WORKER_MODEL = None
            torch.set_num_threads(threads)
    rows = []
    for i, e in enumerate(episodes):
        for k, tr in enumerate(results[i]):
            rel = f"ctx_{i:04d}/trace_{k:03d}"
            write_trace(tr, out / rel)
            rows.append((i, i, int(e.labels[c - 1]), k, tr.seed, trigger.mode, len(tr.switches), rel))
    snapshot = RunConfig.from_dict(cfg.to_dict())
    snapshot.values["train"]["context"] = c
    _atomic_write_bytes(out / "config.ini", snapshot.to_ini().encode("utf-8"))
    _atomic_write_bytes(out / "manifest.csv", _csv_bytes(TRACE_HEADER, rows))
    return out


def ground_truth_traces(cfg: RunConfig, data_dir, out_dir, context: int | None = None) -> Path:
    """Write the real continuation of each context in trace layout (one trace per context).

    Evaluating these against the dataset is the identity check of the metrics.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    c = context if context is not None else cfg["train.context"]
    g = cfg.values["generate"]
    episodes, _ = load_split(data_dir, g["split"], g["contexts"] or None)
    rows = []
    for i, e in enumerate(episodes):
        frames = e.frames[c:c + g["horizon"]]
        if len(frames) < g["horizon"]:
            raise DataError(f"episode {i} has fewer than {c + g['horizon']} frames")
        tr = dvg.GenerationTrace(frames, np.zeros((len(frames), 0)), np.zeros(len(frames)), [], 0)
        rel = f"ctx_{i:04d}/trace_000"
        write_trace(tr, out / rel)
        rows.append((i, i, int(e.labels[c - 1]), 0, 0, "ground_truth", 0, rel))
    snapshot = RunConfig.from_dict(cfg.to_dict())
    snapshot.values["train"]["context"] = c
    _atomic_write_bytes(out / "config.ini", snapshot.to_ini().encode("utf-8"))
    _atomic_write_bytes(out / "manifest.csv", _csv_bytes(TRACE_HEADER, rows))
    return out


def write_trace(tr: dvg.GenerationTrace, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_pgm_stream(d / "frames.pgm", tr.frames)
    dim = tr.latents.shape[1]
    _atomic_write_bytes(d / "latents.csv", _csv_bytes(
        ("step",) + tuple(f"z{j}" for j in range(dim)),
        ((s,) + tuple(repr(float(v)) for v in row) for s, row in enumerate(tr.latents))))
    _atomic_write_bytes(d / "variance.csv", _csv_bytes(
        ("step", "variance_stat"), ((s, repr(float(v))) for s, v in enumerate(tr.variance_stat))))
    _atomic_write_bytes(d / "switches.csv", _csv_bytes(("step", "mode"), tr.switches))


# -- evaluate ----------------------------------------------------------------

def evaluate(cfg: RunConfig, traces_dir, data_dir, out_dir) -> metrics.EvalReport:
    """Score traces against the dataset episodes they were seeded from."""
    traces_dir = Path(traces_dir)
    rows = _read_csv(traces_dir / "manifest.csv")
    snapshot = load_config(traces_dir / "config.ini")
    c, split = snapshot["train.context"], snapshot["generate.split"]
    by_ctx = defaultdict(list)
    for r in rows:
        by_ctx[int(r["context_id"])].append(r)
    n_ctx = max(by_ctx) + 1 if by_ctx else 0
    episodes, walker = load_split(data_dir, split, n_ctx or None)
    if len(episodes) < n_ctx:
        raise DataError(f"traces reference {n_ctx} contexts, dataset split {split!r} has {len(episodes)}")
    report = metrics.EvalReport(action_names=walker.action_names, num_contexts=n_ctx, num_traces=len(rows))
    all_frames, ctx_actions = [], []
    best = {m: [] for m in ("mse", "psnr", "ssim")}
    for cid in sorted(by_ctx):
        ep = episodes[int(by_ctx[cid][0]["episode"])]
        curves_k = []
        for r in sorted(by_ctx[cid], key=lambda r: int(r["trace_id"])):
            frames = read_pgm_stream(traces_dir / r["path"] / "frames.pgm")
            gt = ep.frames[c:c + len(frames)]
            if len(gt) != len(frames):
                raise DataError(f"context {cid}: trace of {len(frames)} frames but only "
                                f"{len(gt)} ground-truth frames after the context")
            if int(r["context_action"]) != int(ep.labels[c - 1]):
                raise DataError(f"context {cid}: trace manifest and dataset disagree on the context action")
            curves = metrics.frame_curves(gt, frames)
            k = int(r["trace_id"])
            for t in range(len(frames)):
                report.curves.append((cid, k, t, curves["mse"][t], curves["psnr"][t], curves["ssim"][t]))
            curves_k.append((k, curves))
            all_frames.append(frames)
            ctx_actions.append(int(r["context_action"]))
        for m in best:
            scores = np.array([cv[m].mean() for _, cv in curves_k])
            j = int(np.argmin(scores) if m == "mse" else np.argmax(scores))
            best[m].append((cid, curves_k[j][0], curves_k[j][1][m]))
    report.best = best
    classify = lambda fr: classify_frames(fr, walker)
    for window in cfg["evaluate.windows"]:
        horizon = min((len(f) for f in all_frames), default=0)
        if window[1] > horizon:
            logger.warning("window %s exceeds the %d-frame horizon; skipped", window, horizon)
            continue
        verdicts = metrics.classify_traces(all_frames, classify, window)
        counts = metrics.transition_counts(ctx_actions, verdicts, walker.num_actions)
        report.transitions[window] = counts
        report.diversity[window] = metrics._changed(ctx_actions, verdicts) / len(ctx_actions)
    metrics.write_report(report, out_dir)
    return report


# -- report ------------------------------------------------------------------

def report(report_dirs, labels, out_dir) -> Path:
    """Side-by-side summary of several evaluation reports plus best-of-K curve data."""
    if len(report_dirs) != len(labels):
        raise ValueError("need one label per report directory")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys, table = [], {}
    plot_rows = []
    for label, d in zip(labels, report_dirs):
        d = Path(d)
        for r in _read_csv(d / "summary.csv"):
            key = r["metric"] if not r["window"] else f"{r['metric']}[{r['window']}]"
            if key not in keys:
                keys.append(key)
            table[label, key] = r["value"]
        sums = defaultdict(list)
        for r in _read_csv(d / "best_of_k.csv"):
            sums[r["metric"], int(r["generated_frame"])].append(float(r["value"]))
        for (m, t), vals in sorted(sums.items()):
            plot_rows.append((label, m, t, metrics._fmt(float(np.mean(vals)))))
    rows = [(label,) + tuple(table.get((label, k), "") for k in keys) for label in labels]
    path = out / "comparison.csv"
    _atomic_write_bytes(path, _csv_bytes(("run",) + tuple(keys), rows))
    _atomic_write_bytes(out / "curves_plot.csv", _csv_bytes(("run", "metric", "generated_frame", "mean_best_value"),
                                                            plot_rows))
    return path


def ablation(cfg: RunConfig, data_dir, out_root, cells=("rnn", "gru", "lstm"),
             modes=("none", "gp_variance")) -> Path:
    """Train one model per recurrent cell, generate per trigger mode, evaluate, compare."""
    out_root = Path(out_root)
    dirs, labels = [], []
    for cell in cells:
        run_cfg = RunConfig.from_dict(cfg.to_dict())
        run_cfg.set("model.cell", cell)
        run_cfg.validate()
        ck = train(run_cfg, data_dir, out_root / cell)
        for mode in modes:
            gen_cfg = RunConfig.from_dict(run_cfg.to_dict())
            gen_cfg.set("trigger.mode", mode)
            tdir = generate(gen_cfg, ck, data_dir, out_root / cell / f"traces_{mode}")
            rdir = out_root / cell / f"report_{mode}"
            evaluate(gen_cfg, tdir, data_dir, rdir)
            dirs.append(rdir)
            labels.append(f"{cell}/{mode}")
    return report(dirs, labels, out_root / "comparison")
