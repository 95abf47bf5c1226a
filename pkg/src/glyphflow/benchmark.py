"""Held-out benchmark and the ablation driver.

The benchmark grid is identities x scene prompts x sampling seeds, identical
for every variant so comparisons are paired. Checkpoints trained with clean
references are sampled with skip level 0; shared-noise checkpoints use their
configured skip level.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import reporting
from .config import RunConfig
from .inference import ConditionBundle, sample
from .metrics import identity_similarity, image_similarity, instruction_alignment
from .pipeline import load_system
from .reporting import GAP
from .training import StageError, TrainingData, make_identity_probe, train_stage

METRIC_NAMES = ("id_sim", "img_sim", "instr_sim")


class MetricsTable:
    """One row per variant: metric mean±std cells plus the sample count and
    the seed set behind them; missing entries render as GAP."""

    def __init__(self, variants, metrics=METRIC_NAMES):
        self.variants = list(variants)
        self.metrics = tuple(metrics)
        self.fields = ("variant",) + self.metrics + ("n_samples", "seed_set")
        self._cells: dict = {}
        self._info: dict = {}

    def set(self, variant, metric, mean, std=0.0):
        if variant not in self.variants or metric not in self.metrics:
            raise KeyError(f"unknown cell ({variant!r}, {metric!r})")
        self._cells[(variant, metric)] = (float(mean), float(std))

    def set_info(self, variant, n_samples, seed_set):
        if variant not in self.variants:
            raise KeyError(f"unknown variant {variant!r}")
        self._info[variant] = (int(n_samples),
                               tuple(int(s) for s in seed_set))

    def get(self, variant, metric):
        return self._cells.get((variant, metric))

    def info(self, variant):
        return self._info.get(variant)

    def rows(self) -> list:
        out = []
        for variant in self.variants:
            row = [variant]
            for metric in self.metrics:
                cell = self.get(variant, metric)
                row.append(GAP if cell is None
                           else f"{cell[0]:.4f}±{cell[1]:.4f}")
            info = self._info.get(variant)
            row.append(GAP if info is None else str(info[0]))
            row.append(GAP if info is None
                       else ";".join(str(s) for s in info[1]))
            out.append(row)
        return out

    def render(self) -> str:
        head = list(self.fields)
        body = self.rows()
        widths = [max(len(r[i]) for r in [head] + body)
                  for i in range(len(head))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths))
                 for r in [head] + body]
        return "\n".join(lines)

    def to_csv(self, path) -> str:
        return reporting.write_rows(path, self.fields, self.rows())


def _test_targets(data: TrainingData, n_identities: int, n_prompts: int):
    """(identity, reference record, target records) triples from the test
    split; the reference scene is never reused as a target."""
    by_id: dict = {}
    for rec in data.test:
        by_id.setdefault(rec.identity_id, []).append(rec)
    targets = []
    for ident in sorted(by_id):
        recs = by_id[ident]
        if len(recs) < 2:
            continue
        others = recs[1:]
        targets.append((ident, recs[0],
                        [others[j % len(others)] for j in range(n_prompts)]))
        if len(targets) == n_identities:
            break
    if not targets:
        raise StageError("benchmark needs test identities with two scenes")
    return targets


def checkpoint_skip_t(meta: dict, cfg) -> float:
    """Clean-reference checkpoints are sampled with their references pinned
    clean; shared-noise checkpoints use the configured skip level."""
    return 0.0 if meta.get("ref_mode") == "clean" else float(cfg.skip_t)


def evaluate_system(system, meta, data: TrainingData, *, n_identities=8,
                    n_prompts=4, n_seeds=5, steps=None, base_seed=100,
                    variant="", rows=None) -> dict:
    """Benchmark one system; returns overall and per-sampling-seed means.

    Each sample re-renders a held-out identity into another of its scenes:
    the reference image conditions the draw, the scene tokens of the target
    record form the prompt. id_sim scores the generation against the
    reference; img_sim against the ground-truth render of the requested
    (identity, scene), which synthetic data provides exactly; instr_sim
    against the prompt tokens.
    """
    skip_t = checkpoint_skip_t(meta, system.cfg)
    targets = _test_targets(data, n_identities, n_prompts)
    per_seed = {k: {m: [] for m in METRIC_NAMES} for k in range(n_seeds)}
    for ident, ref, tgt_recs in targets:
        ref_img = data.image(ref)
        for j, tgt in enumerate(tgt_recs):
            prompt = [t for t in tgt.caption if t.startswith("bg:")]
            tgt_img = data.image(tgt)
            for k in range(n_seeds):
                bundle = ConditionBundle(
                    ref_images=[ref_img], pose_map=data.pose(tgt),
                    prompt=prompt, skip_t=skip_t, steps=steps,
                    seed=base_seed + 7919 * k + 131 * j + ident)
                out = sample(system, bundle)
                vals = {
                    "id_sim": identity_similarity(
                        system.identity_encoder, out.image, ref_img),
                    "img_sim": image_similarity(
                        system.semantic_encoder, out.image, tgt_img),
                    "instr_sim": instruction_alignment(out.image, prompt),
                }
                for m in METRIC_NAMES:
                    per_seed[k][m].append(vals[m])
                if rows is not None:
                    rows.append((variant, ident, j, k,
                                 f"{vals['id_sim']:.6g}",
                                 f"{vals['img_sim']:.6g}",
                                 f"{vals['instr_sim']:.6g}"))
    seed_means = {k: {m: float(np.mean(per_seed[k][m])) for m in METRIC_NAMES}
                  for k in range(n_seeds)}
    result = {}
    for m in METRIC_NAMES:
        everything = [v for k in range(n_seeds) for v in per_seed[k][m]]
        over_seeds = [seed_means[k][m] for k in range(n_seeds)]
        result[m] = (float(np.mean(everything)),
                     float(np.std(over_seeds)))
    result["seed_means"] = seed_means
    result["n_samples"] = len(targets) * n_prompts * n_seeds
    result["seed_set"] = tuple(base_seed + 7919 * k for k in range(n_seeds))
    return result


def evaluate_checkpoint(path, manifest_path, **kw) -> dict:
    system, meta = load_system(path, require=("backbone", "identity_encoder",
                                              "semantic_encoder"))
    return evaluate_system(system, meta, TrainingData(manifest_path), **kw)


def run_benchmark(checkpoints: dict, manifest_path, out_dir=None, *,
                  n_identities=8, n_prompts=4, n_seeds=5, steps=None,
                  base_seed=100) -> MetricsTable:
    """Evaluate named checkpoints; absent ones leave gap markers. Writes the
    table, the per-sample rows and a bar figure when out_dir is given."""
    table = MetricsTable(list(checkpoints))
    rows: list = []
    data = TrainingData(manifest_path)
    for variant, path in checkpoints.items():
        if path is None or not os.path.exists(path):
            continue
        system, meta = load_system(
            path, require=("backbone", "identity_encoder", "semantic_encoder"))
        res = evaluate_system(system, meta, data, n_identities=n_identities,
                              n_prompts=n_prompts, n_seeds=n_seeds,
                              steps=steps, base_seed=base_seed,
                              variant=variant, rows=rows)
        for m in METRIC_NAMES:
            table.set(variant, m, *res[m])
        table.set_info(variant, res["n_samples"], res["seed_set"])
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        table.to_csv(os.path.join(out_dir, "benchmark.csv"))
        reporting.write_rows(
            os.path.join(out_dir, "samples.csv"),
            ("variant", "identity", "prompt", "seed") + METRIC_NAMES, rows)
        reporting.plot_metric_bars(
            table, os.path.join(out_dir, "benchmark.png"),
            title="held-out benchmark")
    return table


# ---------------------------------------------------------------------------
# ablation driver


def _ensure_stage(path, reuse, build):
    if reuse and os.path.exists(path):
        return path
    return build()


def run_ablation(cfg: RunConfig, gen_manifest, edit_manifest, out_dir, *,
                 seeds=(0, 1, 2), include_no_dense=True, n_identities=8,
                 n_prompts=4, n_seeds=5, eval_steps=None, reuse=True,
                 echo=None) -> dict:
    """Train the shared-noise variant against the clean-reference variant
    (equal step budgets) across independent seeds, optionally plus a run
    without the dense path, then benchmark all of them.

    Existing stage checkpoints under out_dir are reused unless reuse=False.
    Returns a summary dict with the pooled table, per-seed means and the
    pairwise comparisons; everything is also written under out_dir.
    """
    say = echo if echo is not None else (lambda *_: None)
    os.makedirs(out_dir, exist_ok=True)
    logs = os.path.join(out_dir, "logs")

    pre = os.path.join(out_dir, "pretrain.ckpt")
    _ensure_stage(pre, reuse, lambda: (
        say(f"pretrain -> {pre}"),
        train_stage(cfg, "pretrain", gen_manifest, pre, log_dir=logs))[-1])
    conn = os.path.join(out_dir, "connector.ckpt")
    _ensure_stage(conn, reuse, lambda: (
        say(f"connector -> {conn}"),
        train_stage(cfg, "connector", edit_manifest, conn, init=pre,
                    log_dir=logs))[-1])

    families = ["equivariant", "vanilla"] + (
        ["no_dve"] if include_no_dense else [])
    paths: dict = {f: {} for f in families}
    for s in seeds:
        sdir = os.path.join(out_dir, f"seed{s}")
        slog = os.path.join(sdir, "logs")

        def stage(name, stage_name, out_name, **kw):
            path = os.path.join(sdir, out_name)
            return _ensure_stage(path, reuse, lambda: (
                say(f"seed {s}: {name} -> {path}"),
                train_stage(cfg, stage_name, gen_manifest, path, seed=s,
                            log_dir=slog, **kw))[-1])

        warm = stage("warmup", "warmup_1to1", "warmup.ckpt",
                     init=pre, connector_init=conn)
        main = stage("main", "main_1toMany", "main.ckpt", init=warm)
        paths["equivariant"][s] = stage(
            "equivariant", "equivariant", "equivariant.ckpt", init=main)
        paths["vanilla"][s] = stage(
            "vanilla extension", "main_1toMany", "vanilla.ckpt",
            init=main, iters=cfg.iters_equivariant)
        if include_no_dense:
            warm_nd = stage("warmup w/o dense", "warmup_1to1",
                            "warmup_nd.ckpt", init=pre, connector_init=conn,
                            use_dense=False)
            main_nd = stage("main w/o dense", "main_1toMany", "main_nd.ckpt",
                            init=warm_nd, use_dense=False)
            paths["no_dve"][s] = stage(
                "equivariant w/o dense", "equivariant", "no_dve.ckpt",
                init=main_nd, use_dense=False)

    data = TrainingData(gen_manifest)
    rows: list = []
    per_seed: dict = {f: {} for f in families}
    n_samples = 0
    for family in families:
        for s in seeds:
            say(f"benchmark: {family} seed {s}")
            system, meta = load_system(paths[family][s])
            res = evaluate_system(
                system, meta, data, n_identities=n_identities,
                n_prompts=n_prompts, n_seeds=n_seeds, steps=eval_steps,
                variant=f"{family}_s{s}", rows=rows)
            per_seed[family][s] = {m: res[m][0] for m in METRIC_NAMES}
            n_samples = res["n_samples"]

    # family rows aggregate over training seeds: mean of per-seed means,
    # std across training seeds
    table = MetricsTable(families)
    for family in families:
        for m in METRIC_NAMES:
            vals = [per_seed[family][s][m] for s in seeds]
            table.set(family, m, float(np.mean(vals)), float(np.std(vals)))
        table.set_info(family, n_samples * len(seeds), seeds)

    def diffs(fam_a, fam_b, metric):
        return [per_seed[fam_a][s][metric] - per_seed[fam_b][s][metric]
                for s in seeds]

    comparisons = {
        "equ_vs_vanilla": {
            "img_sim_diffs": diffs("equivariant", "vanilla", "img_sim"),
            "id_sim_diffs": diffs("equivariant", "vanilla", "id_sim"),
        },
    }
    both = [int(a > 0 and b > 0) for a, b in zip(
        comparisons["equ_vs_vanilla"]["img_sim_diffs"],
        comparisons["equ_vs_vanilla"]["id_sim_diffs"])]
    comparisons["equ_vs_vanilla"]["wins"] = int(sum(both))
    comparisons["equ_vs_vanilla"]["pooled_img_sim"] = float(
        np.mean(comparisons["equ_vs_vanilla"]["img_sim_diffs"]))
    comparisons["equ_vs_vanilla"]["pooled_id_sim"] = float(
        np.mean(comparisons["equ_vs_vanilla"]["id_sim_diffs"]))
    if include_no_dense:
        drop = diffs("equivariant", "no_dve", "img_sim")
        comparisons["dense_ablation"] = {
            "img_sim_drops": drop,
            "wins": int(sum(d > 0 for d in drop)),
            "pooled_img_sim_drop": float(np.mean(drop)),
        }

    table.to_csv(os.path.join(out_dir, "benchmark.csv"))
    reporting.write_rows(
        os.path.join(out_dir, "samples.csv"),
        ("variant", "identity", "prompt", "seed") + METRIC_NAMES, rows)
    reporting.plot_metric_bars(table, os.path.join(out_dir, "benchmark.png"),
                               title="variant comparison")
    first = f"seed{seeds[0]}"
    curve = os.path.join(out_dir, first, "logs", "loss_equivariant.csv")
    if os.path.exists(curve):
        reporting.plot_loss_curves(
            curve, os.path.join(out_dir, "loss_equivariant.png"),
            title=f"shared-noise stage ({first})")

    summary = {
        "per_seed": {f: {str(s): per_seed[f][s] for s in seeds}
                     for f in families},
        "comparisons": comparisons,
        "checkpoints": {f: {str(s): paths[f][s] for s in seeds}
                        for f in families},
        "table": table.render(),
    }
    with open(os.path.join(out_dir, "ablation.json"), "w",
              encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
    return summary


# ---------------------------------------------------------------------------
# identity-loss dynamics


def max_relative_decline(values) -> float:
    """Worst drop below the running peak, as a fraction of that peak."""
    peak = 0.0
    worst = 0.0
    for v in values:
        if v > peak:
            peak = v
        elif peak > 1e-9:
            worst = max(worst, (peak - v) / peak)
    return worst


def trailing_mean(values, window: int) -> list:
    """Mean over the last `window` values at each index (shorter at the
    start); window 1 returns the input unchanged."""
    if window < 1:
        raise ValueError("window must be >= 1")
    out = []
    for i in range(len(values)):
        lo = max(0, i + 1 - window)
        out.append(float(np.mean(values[lo:i + 1])))
    return out


def run_identity_dynamics(cfg: RunConfig, manifest_path, main_ckpt, out_dir, *,
                          iters=None, probe_every=None, probe_steps=8,
                          probe_identities=8, probe_prompts=2, probe_seeds=12,
                          smooth=3, probe_ema=0.99, seed=0, echo=None) -> dict:
    """Extend training from a main-stage checkpoint twice, with and without
    the identity loss, probing held-out identity similarity along the way.

    Probes read EMA weights and declines are measured on a short trailing
    mean of the probe curve: single SGD iterates (and single probe values)
    wobble far more than the trend under measurement, and the two smoothers
    keep that wobble from defining the running peak."""
    say = echo if echo is not None else (lambda *_: None)
    os.makedirs(out_dir, exist_ok=True)
    total = cfg.iters_equivariant if iters is None else int(iters)
    every = max(25, total // 12) if probe_every is None else int(probe_every)
    data = TrainingData(manifest_path)
    probe = make_identity_probe(data, n_identities=probe_identities,
                                n_prompts=probe_prompts, n_seeds=probe_seeds,
                                steps=probe_steps, seed=seed)

    curves = {}
    for lam, name in ((0.0, "no_id"), (cfg.lambda_id, "with_id")):
        say(f"identity dynamics: lambda={lam} ({name})")
        logs = os.path.join(out_dir, f"logs_{name}")
        ck = os.path.join(out_dir, f"equ_{name}.ckpt")
        train_stage(cfg, "equivariant", manifest_path, ck, init=main_ckpt,
                    iters=total, lambda_id=lam, seed=seed, log_dir=logs,
                    probe_fn=probe, probe_every=every, probe_ema=probe_ema)
        xs, series = reporting.read_curve(
            os.path.join(logs, "probe_equivariant.csv"))
        curves[name] = (xs, series["id_sim"],
                        trailing_mean(series["id_sim"], smooth))

    declines = {name: max_relative_decline(smoothed)
                for name, (_, _, smoothed) in curves.items()}
    reporting.plot_series(
        {name: (xs, smoothed) for name, (xs, _, smoothed) in curves.items()},
        os.path.join(out_dir, "id_dynamics.png"),
        ylabel="probe id_sim",
        title="identity similarity during extended training")
    result = {
        "declines": declines,
        "curves": {name: {"steps": xs, "id_sim": raw, "smoothed": smoothed}
                   for name, (xs, raw, smoothed) in curves.items()},
    }
    with open(os.path.join(out_dir, "id_dynamics.json"), "w",
              encoding="utf-8") as f:
        json.dump(result, f, indent=2)
    return result
