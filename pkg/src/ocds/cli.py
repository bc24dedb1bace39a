"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ocds.corpus import load_corpus
from ocds.errors import ConfigError, NumericalError
from ocds.model import BigramModel, DownstreamLoss
from ocds.optim import BatchConfig
from ocds.pipeline import (
    FixtureConfig,
    SimulationConfig,
    derive_seed,
    load_config,
    planted_fixture,
    run_pipeline,
    simulate_exact_vs_efficient,
    write_fixture,
)
from ocds.pmp import (
    SolverConfig,
    harvest_checkpoints,
    multi_checkpoint_scores,
    read_scores,
    write_scores,
    write_solver_manifest,
)
from ocds.scaling import estimate_flops, fit_scaling_law, predict_loss, read_fit, read_points_csv, write_fit
from ocds.scorer import HashedNgramExtractor, ScorerModel, fit_scorer, infer_scores
from ocds.select import SelectionConfig, gumbel_topk, materialize, write_selection


def _common(p: argparse.ArgumentParser, out_required=False):
    p.add_argument("--config", help="key-value config file with dotted sections")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--force", action="store_true", help="recompute even if outputs are up to date")


def _corpus_args(p, name="--corpus"):
    p.add_argument(name, help="corpus file (text or binary token file)")
    p.add_argument("--vocab", help="vocabulary file for text corpora")
    p.add_argument("--tokenizer", default="whitespace", choices=["whitespace", "char"])


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_doc(path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    try:
        return tomllib.loads(Path(path).read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _solver_from(args) -> tuple[SolverConfig, int, int]:
    """Solver config, pre-training steps and seed from --config plus flags."""
    solver, pretrain, seed = SolverConfig(), 500, 0
    if args.config:
        doc = _read_doc(args.config)
        try:
            solver = SolverConfig(**doc.get("solver", {}))
        except TypeError as exc:
            raise ConfigError(f"[solver]: {exc}") from exc
        pretrain = int(doc.get("proxy", {}).get("pretrain_steps", pretrain))
        seed = int(doc.get("seed", seed))
    if args.seed is not None:
        seed = args.seed
    return solver, pretrain, seed


# -- subcommands -----------------------------------------------------------------

def cmd_solve_gamma(args):
    solver, pretrain, seed = _solver_from(args)
    if args.steps is not None:
        solver = replace(solver, steps=args.steps)
    proxy, V = load_corpus(args.corpus, args.vocab, args.tokenizer, role="proxy")
    down, V2 = load_corpus(args.downstream, args.vocab, args.tokenizer, role="downstream")
    model = BigramModel(max(V, V2))
    solver = replace(solver, seed=derive_seed(seed, "solver"))
    theta_init = np.zeros(model.n_params)
    cks = harvest_checkpoints(model, proxy, theta_init, pretrain, solver.n_checkpoints, solver.lr,
                              BatchConfig(solver.batch_size, derive_seed(seed, "pretrain")))
    gamma = multi_checkpoint_scores(model, proxy, DownstreamLoss(down), cks, solver)
    out = _out_dir(args)
    write_scores(out / "gamma.tsv", gamma, "gamma")
    write_solver_manifest(out / "solver_manifest.json", solver, seed=seed, pretrain_steps=pretrain,
                          corpus=str(args.corpus), downstream=str(args.downstream))
    print(f"wrote {out / 'gamma.tsv'} ({gamma.size} scores)")


def cmd_train_scorer(args):
    data, _ = load_corpus(args.corpus, args.vocab, args.tokenizer, role="proxy")
    ids, gamma = read_scores(args.scores)
    if ids.size != len(data) or not np.array_equal(np.sort(ids), np.arange(len(data))):
        raise ConfigError("score ids must cover the corpus instances 0..n-1")
    gamma = gamma[np.argsort(ids)]
    seed = args.seed if args.seed is not None else 0
    ext = HashedNgramExtractor(args.dim, tuple(args.orders))
    model = fit_scorer(data, gamma, ext, val_fraction=args.val_fraction, seed=derive_seed(seed, "scorer"),
                       method=args.method)
    out = _out_dir(args)
    model.save(out / "scorer.json")
    flag = " (flagged)" if model.flagged else ""
    print(f"validation spearman {model.val_spearman}{flag}; wrote {out / 'scorer.json'}")


def cmd_score(args):
    model = ScorerModel.load(args.scorer)
    data, _ = load_corpus(args.corpus, args.vocab, args.tokenizer)
    out = _out_dir(args)
    write_scores(out / "inferred.tsv", infer_scores(model, data), "score")
    print(f"wrote {out / 'inferred.tsv'} ({len(data)} scores)")


def cmd_select(args):
    ids, scores = read_scores(args.scores)
    order = np.argsort(ids)
    ids, scores = ids[order], scores[order]
    seed = args.seed if args.seed is not None else 0
    cfg = SelectionConfig.create(args.ratio, args.tau, args.delta, seed=seed, standardize=args.standardize)
    result = gumbel_topk(scores, cfg)
    out = _out_dir(args)
    write_selection(out / "selection.tsv", result, with_keys=args.with_keys, ids=ids)
    if args.materialize:
        corpus, V = load_corpus(args.materialize, args.vocab, args.tokenizer)
        if len(corpus) != scores.size:
            raise ConfigError("corpus size does not match the number of scores")
        materialize(corpus, result, out / "selected.bin", V)
    print(f"selected {result.k} of {scores.size}; wrote {out / 'selection.tsv'}")


def cmd_fit_scaling(args):
    if args.constants:
        fit = read_fit(args.constants)
    elif args.points:
        points = read_points_csv(args.points)
        fit = fit_scaling_law(points, delta=args.delta, max_steps=args.max_steps)
        if args.out:
            out = _out_dir(args)
            write_fit(out / "scaling_fit.json", fit, points)
    else:
        raise ConfigError("fit-scaling needs --points or --constants")
    print(f"A={fit.A:.6g} B={fit.B:.6g} E={fit.E:.6g} alpha={fit.alpha:.6g} beta={fit.beta:.6g}")
    if args.predict:
        print(f"{'N':>12} {'D':>12} {'predicted L':>12}")
        for pair in args.predict:
            try:
                n_str, d_str = pair.split(":")
                N, D = float(n_str), float(d_str)
            except ValueError as exc:
                raise ConfigError(f"--predict expects N:D, got {pair!r}") from exc
            print(f"{N:>12.4g} {D:>12.4g} {predict_loss(fit, N, D):>12.4f}")


def cmd_estimate_flops(args):
    rec = estimate_flops(args.N, args.D, args.N_prx, args.D_prx, args.N_score, args.M)
    text = json.dumps(rec, indent=2, sort_keys=True)
    if args.out:
        (_out_dir(args) / "flops.json").write_text(text + "\n")
    print(text)


def cmd_pipeline(args):
    if not args.config:
        raise ConfigError("pipeline needs --config")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.config, overrides)
    if args.out:
        cfg.out = args.out
    manifest = run_pipeline(cfg, force=args.force)
    ran = [s for s in manifest["timings"] if s not in manifest["skipped"]]
    print(f"stages run: {', '.join(ran) or 'none'}; skipped: {', '.join(manifest['skipped']) or 'none'}")
    print(f"manifest: {Path(cfg.out) / 'manifest.json'}")


def cmd_simulate(args):
    seed = args.seed if args.seed is not None else 0
    cfg = SimulationConfig(fixture=FixtureConfig(seed=seed))
    rec = simulate_exact_vs_efficient(cfg)
    out = _out_dir(args)
    if args.fixture_dir:
        write_fixture(planted_fixture(cfg.fixture), args.fixture_dir)
    (out / "simulation.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
    print(f"{'variant':<10} {'AUC':>10} {'clean':>6} {'solver FLOPs':>13}")
    for name, v in rec["variants"].items():
        print(f"{name:<10} {v['auc']:>10.2f} {v['clean_precision']:>6.2f} {v['solver_flops']:>13.3e}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ocds", description="Optimal-control data selection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve-gamma", help="solve quality scores on a proxy corpus")
    _common(p)
    _corpus_args(p)
    p.add_argument("--downstream", required=True)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_solve_gamma)

    p = sub.add_parser("train-scorer", help="fit the data scorer on solved scores")
    _common(p)
    _corpus_args(p)
    p.add_argument("--scores", required=True)
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--orders", type=int, nargs="+", default=[1, 2])
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--method", choices=["ridge", "adamw"], default="ridge")
    p.set_defaults(func=cmd_train_scorer)

    p = sub.add_parser("score", help="infer scores over a corpus")
    _common(p)
    _corpus_args(p)
    p.add_argument("--scorer", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("select", help="Gumbel top-K selection")
    _common(p)
    p.add_argument("--scores", required=True)
    p.add_argument("--ratio", type=float, default=0.4)
    p.add_argument("--tau", type=float)
    p.add_argument("--delta", type=float, help="alias of --tau")
    p.add_argument("--with-keys", action="store_true")
    p.add_argument("--standardize", action="store_true", help="z-score the scores before adding noise")
    p.add_argument("--materialize", help="corpus to write the selected instances from")
    p.add_argument("--vocab")
    p.add_argument("--tokenizer", default="whitespace", choices=["whitespace", "char"])
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("fit-scaling", help="fit or apply a scaling law")
    _common(p)
    p.add_argument("--points", help="CSV with header N,D,L")
    p.add_argument("--constants", help="previously written fit JSON")
    p.add_argument("--delta", type=float, default=1e-3)
    p.add_argument("--max-steps", type=int, default=10_000)
    p.add_argument("--predict", nargs="*", metavar="N:D")
    p.set_defaults(func=cmd_fit_scaling)

    p = sub.add_parser("estimate-flops", help="per-stage FLOPs estimate")
    _common(p)
    p.add_argument("--N", type=float, required=True)
    p.add_argument("--D", type=float, required=True)
    p.add_argument("--N-prx", dest="N_prx", type=float, required=True)
    p.add_argument("--D-prx", dest="D_prx", type=float, required=True)
    p.add_argument("--N-score", dest="N_score", type=float, required=True)
    p.add_argument("--M", type=int, default=5)
    p.set_defaults(func=cmd_estimate_flops)

    p = sub.add_parser("pipeline", help="run every stage from a config file")
    _common(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("simulate", help="exact vs efficient solver on the planted fixture")
    _common(p)
    p.add_argument("--fixture-dir", help="also write the fixture corpora, vocabulary and labels here")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except NumericalError as exc:
        print(f"numerical failure in stage {exc.stage or args.command}: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"configuration error ({args.command}): {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
