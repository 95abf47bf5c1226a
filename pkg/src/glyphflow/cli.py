"""Command-line entry point.

Every config key is also a flag (kebab-case). Artifacts default into
<run_dir>/<config hash>/ so runs with different settings never collide; the
REMIX_RUN_DIR environment variable overrides the run root. Exit codes:
0 success, 1 failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import SCHEMA, ConfigError, RunConfig, default_config, load_config


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE",
                        help="config file of 'key = value' lines")
    group = parser.add_argument_group("config overrides")
    for key, (typ, default, help_text) in SCHEMA.items():
        group.add_argument(_flag(key), dest=f"cfg_{key}", type=typ,
                           default=None, metavar=typ.__name__.upper(),
                           help=f"{help_text} (default {default})")


def _build_config(args) -> RunConfig:
    overrides = {}
    for key in SCHEMA:
        val = getattr(args, f"cfg_{key}", None)
        if val is not None:
            overrides[key] = val
    if args.config:
        return load_config(args.config, **overrides)
    return default_config(**overrides)


def _run_dir(cfg: RunConfig) -> str:
    path = os.path.join(cfg.resolved_run_dir(), cfg.hash)
    os.makedirs(path, exist_ok=True)
    return path


def _load_image(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        u8 = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return u8.astype(np.float32) / np.float32(256.0)


def _tokens(text) -> list:
    return text.split() if text else []


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth_data(args) -> int:
    from .data_synth import build_dataset

    cfg = _build_config(args)
    out = args.out or os.path.join(cfg.data_dir, args.mode)
    manifest = build_dataset(
        out, seed=cfg.seed, n_train=args.n_train, n_test=args.n_test,
        scenes=args.scenes, mode=args.mode, size=cfg.image_size,
        n_triples=args.n_triples, overwrite=args.overwrite)
    print(manifest)
    return 0


def _cmd_pretrain(args) -> int:
    from .training import pretrain

    cfg = _build_config(args)
    run = _run_dir(cfg)
    out = args.out or os.path.join(run, "pretrain.ckpt")
    path = pretrain(cfg, args.data, out, log_dir=os.path.join(run, "logs"),
                    resume=args.resume)
    print(path)
    return 0


def _cmd_train_connector(args) -> int:
    from .training import train_connector

    cfg = _build_config(args)
    run = _run_dir(cfg)
    init = args.init or os.path.join(run, "pretrain.ckpt")
    out = args.out or os.path.join(run, "connector.ckpt")
    path = train_connector(cfg, args.data, init, out,
                           log_dir=os.path.join(run, "logs"))
    print(path)
    return 0


def _cmd_train_ipcn(args) -> int:
    from .training import train_stage

    cfg = _build_config(args)
    run = _run_dir(cfg)
    logs = os.path.join(run, "logs")
    pre = args.init or os.path.join(run, "pretrain.ckpt")
    conn = args.connector_init or os.path.join(run, "connector.ckpt")
    use_dense = not args.no_dense

    if args.stage == "all":
        warm = train_stage(cfg, "warmup_1to1", args.data,
                           os.path.join(run, "warmup.ckpt"), init=pre,
                           connector_init=conn, use_dense=use_dense,
                           log_dir=logs)
        main_ck = train_stage(cfg, "main_1toMany", args.data,
                              os.path.join(run, "main.ckpt"), init=warm,
                              use_dense=use_dense, log_dir=logs)
        out = train_stage(cfg, "equivariant", args.data,
                          os.path.join(run, "equivariant.ckpt"), init=main_ck,
                          lambda_id=args.lambda_override,
                          use_dense=use_dense, log_dir=logs)
        print(out)
        return 0

    defaults = {"warmup_1to1": "warmup.ckpt", "main_1toMany": "main.ckpt",
                "equivariant": "equivariant.ckpt"}
    out = args.out or os.path.join(run, defaults[args.stage])
    init = args.init
    kwargs = {}
    if args.stage == "warmup_1to1":
        init = args.init or pre
        kwargs["connector_init"] = conn
    elif init is None:
        prev = {"main_1toMany": "warmup.ckpt", "equivariant": "main.ckpt"}
        init = os.path.join(run, prev[args.stage])
    path = train_stage(cfg, args.stage, args.data, out, init=init,
                       iters=args.iters, lambda_id=args.lambda_override,
                       use_dense=use_dense, log_dir=logs,
                       resume=args.resume, **kwargs)
    print(path)
    return 0


def _cmd_sample(args) -> int:
    from .inference import ConditionBundle, sample, save_outputs
    from .pipeline import load_system

    cfg = _build_config(args)
    ckpt = args.ckpt or os.path.join(_run_dir(cfg), "equivariant.ckpt")
    system, meta = load_system(ckpt)
    refs = [_load_image(p) for p in args.refs or []]
    pose = _load_image(args.pose) if args.pose else None
    skip_t = args.cfg_skip_t
    if skip_t is None and meta.get("ref_mode") == "clean":
        skip_t = 0.0
    seed = 0 if args.cfg_seed is None else args.cfg_seed
    bundle = ConditionBundle(
        ref_images=refs or None, pose_map=pose,
        prompt=_tokens(args.prompt) or None,
        instruction=_tokens(args.instruction) or None,
        alpha=args.cfg_alpha, beta=args.cfg_beta, skip_t=skip_t,
        steps=args.cfg_steps, seed=seed)
    result = sample(system, bundle)
    out = args.out or os.path.join(_run_dir(cfg), f"sample_seed{seed}")
    for name, path in sorted(save_outputs(result, out).items()):
        print(path)
    return 0


def _parse_ckpt_specs(specs) -> dict:
    out = {}
    for spec in specs:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = os.path.splitext(os.path.basename(spec))[0], spec
        out[name] = path
    return out


def _cmd_evaluate(args) -> int:
    from .benchmark import run_benchmark

    cfg = _build_config(args)
    out = args.out or os.path.join(_run_dir(cfg), "eval")
    table = run_benchmark(
        _parse_ckpt_specs(args.ckpt), args.data, out,
        n_identities=args.n_identities, n_prompts=args.n_prompts,
        n_seeds=args.n_seeds, steps=args.eval_steps)
    print(table.render())
    print(f"wrote {out}/benchmark.csv")
    return 0


ABLATION_AXES = ("equivariant", "dense", "identity")


def _cmd_ablate(args) -> int:
    from .benchmark import run_ablation, run_identity_dynamics

    cfg = _build_config(args)
    out = args.out or os.path.join(_run_dir(cfg), "ablation")
    seeds = tuple(int(s) for s in args.seeds.split(","))
    axes = tuple(a.strip() for a in args.axes.split(",") if a.strip())
    unknown = [a for a in axes if a not in ABLATION_AXES]
    if unknown:
        raise ConfigError(f"unknown ablation axes {unknown}; "
                          f"choose from {', '.join(ABLATION_AXES)}")
    summary = run_ablation(
        cfg, args.data, args.edit_data, out, seeds=seeds,
        include_no_dense="dense" in axes,
        n_identities=args.n_identities, n_prompts=args.n_prompts,
        n_seeds=args.n_seeds, eval_steps=args.eval_steps,
        reuse=not args.fresh, echo=lambda *a: print(*a))
    print(summary["table"])
    comp = summary["comparisons"]["equ_vs_vanilla"]
    print(f"shared-noise vs clean-reference: wins {comp['wins']}/{len(seeds)}, "
          f"pooled img_sim diff {comp['pooled_img_sim']:+.4f}, "
          f"pooled id_sim diff {comp['pooled_id_sim']:+.4f}")
    if "dense_ablation" in summary["comparisons"]:
        d = summary["comparisons"]["dense_ablation"]
        print(f"dense-path ablation: img_sim drop {d['pooled_img_sim_drop']:+.4f} "
              f"({d['wins']}/{len(seeds)} seeds)")
    if "identity" in axes:
        main_ck = os.path.join(out, f"seed{seeds[0]}", "main.ckpt")
        dyn = run_identity_dynamics(
            cfg, args.data, main_ck, os.path.join(out, "dynamics"),
            seed=seeds[0], echo=lambda *a: print(*a))
        for name, decline in dyn["declines"].items():
            print(f"probe decline ({name}): {decline:.1%}")
    return 0


def _cmd_verify(args) -> int:
    cfg = _build_config(args)
    results = run_verification(cfg)
    failures = 0
    for name, ok, detail in results:
        suffix = "" if not detail else f" ({detail})"
        print(f"{'PASS' if ok else 'FAIL'} {name}{suffix}")
        if not ok:
            failures += 1
    print(f"{len(results) - failures}/{len(results)} checks passed")
    return 0 if failures == 0 else 1


def run_verification(cfg: RunConfig | None = None) -> list:
    """Fast self-checks; returns (name, ok, detail) triples."""
    import torch

    from . import codec
    from .backbone import assign_positions
    from .inference import skip_ahead_noise
    from .losses import DiffusionStep, equ_loss, id_loss, total_loss
    from .pipeline import build_system
    from .vocab import Vocabulary

    checks = []

    def check(name, fn):
        try:
            detail = fn()
            checks.append((name, True, detail or ""))
        except Exception as err:  # noqa: BLE001  report, not crash
            checks.append((name, False, f"{type(err).__name__}: {err}"))

    def codec_round_trip():
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = int(rng.choice([2, 4, 8]))
            h = int(rng.integers(1, 5)) * p
            w = int(rng.integers(1, 5)) * p
            img = rng.integers(0, 256, (h, w, 3)).astype(np.float32) / 256.0
            back = codec.decode_latent(codec.encode_image(img, p), p)
            if not np.array_equal(img, back):
                raise AssertionError("round trip not bit-exact")
        return "50 shapes bit-exact"

    def zero_init_noop():
        torch.manual_seed(0)
        tiny = default_config(
            p=4, image_size=16, depth=2, model_dim=64, heads=4,
            feature_dim=32, m_tokens=4, d=1, l=2, n_blocks=2)
        vocab = Vocabulary(["bg:white"])
        sysm = build_system(tiny, vocab, with_control=True, seed=0)
        lat = sysm.latent_size
        canvas = torch.randn(lat, 2 * lat, sysm.latent_channels)
        pos = sysm.positions_for(1)
        text = torch.randn(3, tiny.feature_dim)
        pooled = text.mean(dim=0)
        dense = torch.randn(lat, lat, sysm.latent_channels)
        with torch.no_grad():
            a = sysm.forward(canvas, pos, text, pooled, 0.5,
                             dense=dense, ref_width=lat)
            b = sysm.forward(canvas, pos, text, pooled, 0.5,
                             enable_control=False)
        if not torch.equal(a, b):
            raise AssertionError("control path at zero init is not a no-op")
        return "forward bit-exact with and without control"

    def loss_identities():
        torch.manual_seed(1)
        clean = torch.randn(2, 3, 4)
        eps = torch.randn(2, 3, 4)
        step = DiffusionStep(0.3, eps)
        if float(equ_loss(eps - clean, step, clean)) != 0.0:
            raise AssertionError("equ_loss(pred=target) != 0")
        e = torch.eye(3)
        pairs = [((e[0], e[0]), 0.0), ((e[0], e[1]), 1.0), ((e[0], -e[0]), 2.0)]
        for (a, b), want in pairs:
            got = float(id_loss(a[None], b[None]))
            if abs(got - want) > 1e-6:
                raise AssertionError(f"id_loss endpoint {want} got {got}")
        le, li = torch.tensor(0.5), torch.tensor(0.25)
        if abs(float(total_loss(le, li, 0.2)) - 0.55) > 1e-6:
            raise AssertionError("total_loss != l_equ + lambda*l_id")
        return "equ zero, id endpoints, total composition"

    def positions_disjoint():
        for n in range(1, 5):
            h, w = 4, 4
            grid = assign_positions(h, [w] * n, w)
            pairs = list(zip(grid.row_ids.tolist(), grid.col_ids.tolist()))
            # token order is row-major over the full canvas, so split by column
            ref = {(r, c) for r, c in pairs if c < n * w}
            tgt = {(r, c) for r, c in pairs if c >= n * w}
            if ref & tgt:
                raise AssertionError(f"overlap with {n} references")
            if min(tgt) != (h, n * w):
                raise AssertionError("target origin is not (h, sum of widths)")
        return "1-4 references disjoint from target"

    def skip_ahead_endpoints():
        z = torch.randn(4, 4, 12)
        eps = torch.randn(4, 4, 12)
        if not torch.equal(skip_ahead_noise(z, 0.0, eps), z):
            raise AssertionError("t=0 must return the latent unchanged")
        if not torch.equal(skip_ahead_noise(z, 1.0, eps), eps):
            raise AssertionError("t=1 must return pure noise")
        return "t=0 and t=1 exact"

    def gradient_check():
        from .connector import (
            InstructionConnector,
            InstructionEmbedding,
            connector_loss,
        )

        def fd_check(fn, leaf, what, n_coords=5):
            loss = fn()
            leaf.grad = None
            loss.backward()
            grad = leaf.grad.detach().clone()
            flat = leaf.detach().view(-1)
            rng = np.random.default_rng(0)
            for i in rng.choice(flat.numel(), size=min(n_coords, flat.numel()),
                                replace=False):
                h = 1e-6
                orig = float(flat[i])
                flat[i] = orig + h
                hi = float(fn().detach())
                flat[i] = orig - h
                lo = float(fn().detach())
                flat[i] = orig
                fd = (hi - lo) / (2 * h)
                an = float(grad.view(-1)[i])
                rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
                if rel > 1e-4:
                    raise AssertionError(
                        f"{what}: analytic {an:.6g} vs fd {fd:.6g}")

        torch.manual_seed(2)
        pred = torch.randn(2, 2, 3, dtype=torch.float64, requires_grad=True)
        eps = torch.randn(2, 2, 3, dtype=torch.float64)
        clean = torch.randn(2, 2, 3, dtype=torch.float64)
        step = DiffusionStep(0.4, eps)
        fd_check(lambda: equ_loss(pred, step, clean), pred, "equ_loss")

        a = torch.randn(3, 8, dtype=torch.float64, requires_grad=True)
        b = torch.randn(3, 8, dtype=torch.float64)
        fd_check(lambda: id_loss(a, b), a, "id_loss")

        conn = InstructionConnector(d=1, l=1, feature_dim=16, heads=2).double()
        with torch.no_grad():  # un-zero the output proj so the path is live
            torch.nn.init.normal_(conn.cross[0].out.weight, std=0.1)
        emb = InstructionEmbedding(torch.randn(2, 16, dtype=torch.float64),
                                   torch.randn(16, dtype=torch.float64))
        key = torch.randn(3, 16, dtype=torch.float64, requires_grad=True)
        target = torch.randn(3, 16, dtype=torch.float64)
        fd_check(lambda: connector_loss(conn(emb, key), target), key,
                 "connector_loss")
        return "equ, id and connector gradients match finite differences"

    check("codec_round_trip", codec_round_trip)
    check("zero_init_noop", zero_init_noop)
    check("gradient_check", gradient_check)
    check("loss_identities", loss_identities)
    check("positions_disjoint", positions_disjoint)
    check("skip_ahead_endpoints", skip_ahead_endpoints)
    return checks


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glyphflow",
        description="character-consistent glyph generation at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        p.set_defaults(fn=fn)
        return p

    p = command("synth-data", _cmd_synth_data, "render a synthetic dataset")
    p.add_argument("--out", help="dataset directory")
    p.add_argument("--mode", default="one_to_many",
                   choices=["one_to_one", "one_to_many", "editing_triples"])
    p.add_argument("--n-train", type=int, default=512)
    p.add_argument("--n-test", type=int, default=64)
    p.add_argument("--scenes", type=int, default=6)
    p.add_argument("--n-triples", type=int, default=2000)
    p.add_argument("--overwrite", action="store_true")

    p = command("pretrain", _cmd_pretrain, "train the base generator")
    p.add_argument("--data", required=True, metavar="MANIFEST")
    p.add_argument("--out")
    p.add_argument("--resume", action="store_true")

    p = command("train-connector", _cmd_train_connector,
                "align the instruction connector (generator never loaded)")
    p.add_argument("--data", required=True, metavar="MANIFEST",
                   help="editing-triples manifest")
    p.add_argument("--init", help="pretrain checkpoint")
    p.add_argument("--out")

    p = command("train-ipcn", _cmd_train_ipcn,
                "train the visual-control stages")
    p.add_argument("--data", required=True, metavar="MANIFEST")
    p.add_argument("--stage", default="all",
                   choices=["warmup_1to1", "main_1toMany", "equivariant",
                            "all"])
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--connector-init", help="connector checkpoint")
    p.add_argument("--out")
    p.add_argument("--iters", type=int)
    p.add_argument("--lambda-override", type=float, dest="lambda_override",
                   help="identity-loss weight for the shared-noise stage")
    p.add_argument("--no-dense", action="store_true",
                   help="train without the dense visual path")
    p.add_argument("--resume", action="store_true")

    # --alpha --beta --skip-t --steps --seed arrive via the config flags
    p = command("sample", _cmd_sample, "generate or edit an image")
    p.add_argument("--ckpt")
    p.add_argument("--refs", nargs="+", metavar="PNG")
    p.add_argument("--pose", metavar="PNG")
    p.add_argument("--prompt", help="space-separated caption symbols")
    p.add_argument("--instruction", help="space-separated edit symbols")
    p.add_argument("--out")

    p = command("evaluate", _cmd_evaluate, "benchmark checkpoints")
    p.add_argument("--ckpt", nargs="+", required=True,
                   metavar="[NAME=]PATH")
    p.add_argument("--data", required=True, metavar="MANIFEST")
    p.add_argument("--out")
    p.add_argument("--n-identities", type=int, default=8)
    p.add_argument("--n-prompts", type=int, default=4)
    p.add_argument("--n-seeds", type=int, default=5)
    p.add_argument("--eval-steps", type=int)

    p = command("ablate", _cmd_ablate,
                "train and compare variants across seeds")
    p.add_argument("--data", required=True, metavar="MANIFEST")
    p.add_argument("--edit-data", required=True, metavar="MANIFEST")
    p.add_argument("--out")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--axes", default="equivariant,dense",
                   help="comma-separated subset of "
                        f"{{{','.join(ABLATION_AXES)}}}")
    p.add_argument("--n-identities", type=int, default=8)
    p.add_argument("--n-prompts", type=int, default=4)
    p.add_argument("--n-seeds", type=int, default=5)
    p.add_argument("--eval-steps", type=int)
    p.add_argument("--fresh", action="store_true",
                   help="ignore existing stage checkpoints")

    command("verify", _cmd_verify, "run fast self-checks")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as err:  # noqa: BLE001  CLI boundary
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
