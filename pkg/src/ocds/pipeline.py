"""End-to-end orchestration: proxy sampling, solving, scoring, selection.

Every stage writes its artifacts under the output directory together with
a stage key (hash of its configuration and upstream digests).  Re-running
with an unchanged key and intact artifacts skips the stage.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ocds import __version__
from ocds.corpus import Vocabulary, load_corpus, write_token_file
from ocds.errors import ConfigError, NumericalError, OCDSError
from ocds.model import BigramModel, Dataset, DownstreamLoss, Model
from ocds.optim import BatchConfig, OptimizerConfig, read_checkpoint, train, write_checkpoint
from ocds.pmp import SolverConfig, harvest_checkpoints, multi_checkpoint_scores, pmp_solve, write_scores
from ocds.scaling import compute_auc, estimate_flops
from ocds.scorer import HashedNgramExtractor, ScorerModel, fit_scorer, infer_scores, spearman
from ocds.select import SelectionConfig, gumbel_topk, materialize, write_selection

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


def derive_seed(global_seed: int, stage: str) -> int:
    """Stable per-stage seed from the global seed and a stage name."""
    h = hashlib.blake2b(f"{int(global_seed)}:{stage}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 1


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- configuration -------------------------------------------------------------

@dataclass
class PipelineConfig:
    corpus: str
    downstream: str
    out: str
    vocab: str | None = None
    tokenizer: str = "whitespace"
    proxy_size: int = 64
    pretrain_steps: int = 500
    init_scale: float = 0.0
    solver: SolverConfig = field(default_factory=SolverConfig)
    extractor_dim: int = 256
    extractor_orders: tuple[int, ...] = (1, 2)
    scorer_regs: tuple[float, ...] = (1e-6, 1e-4, 1e-2, 1.0)
    val_fraction: float = 0.1
    selection: SelectionConfig = field(default_factory=lambda: SelectionConfig(standardize=True))
    seed: int = 0

    def validate(self, check_paths: bool = True) -> None:
        if check_paths:
            for name in ("corpus", "downstream", "vocab"):
                p = getattr(self, name)
                if p is not None and not Path(p).exists():
                    raise ConfigError(f"paths.{name}: {p} does not exist")
        if self.proxy_size < 1:
            raise ConfigError("proxy.size must be >= 1")
        if self.pretrain_steps < self.solver.n_checkpoints:
            raise ConfigError("proxy.pretrain_steps must be >= solver.n_checkpoints")

    def echo(self) -> dict:
        d = asdict(self)
        d["extractor_orders"] = list(self.extractor_orders)
        d["scorer_regs"] = list(self.scorer_regs)
        return d


_SECTION_KEYS = {
    "paths": {"corpus", "downstream", "out", "vocab"},
    "corpus": {"tokenizer"},
    "proxy": {"size", "pretrain_steps", "init_scale"},
    "solver": {f.name for f in fields(SolverConfig)},
    "scorer": {"dim", "orders", "regs", "val_fraction"},
    "select": {"ratio", "tau", "delta", "standardize"},
}


def load_config(path, overrides: dict | None = None) -> PipelineConfig:
    """Read a flat key-value file with dotted section names (TOML syntax).

    Relative paths are resolved against the config file's directory.
    """
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc, base=path.parent, overrides=overrides)


def config_from_dict(doc: dict, base=None, overrides: dict | None = None) -> PipelineConfig:
    doc = json.loads(json.dumps(doc))
    for key, val in (overrides or {}).items():
        sec, _, name = key.partition(".")
        if name:
            doc.setdefault(sec, {})[name] = val
        else:
            doc[sec] = val
    for sec, body in doc.items():
        if sec == "seed":
            continue
        if sec not in _SECTION_KEYS or not isinstance(body, dict):
            raise ConfigError(f"unknown config section {sec!r}")
        unknown = set(body) - _SECTION_KEYS[sec]
        if unknown:
            raise ConfigError(f"unknown keys in [{sec}]: {sorted(unknown)}")

    base = Path(base) if base is not None else Path(".")
    paths = doc.get("paths", {})
    for req in ("corpus", "downstream", "out"):
        if req not in paths:
            raise ConfigError(f"paths.{req} is required")

    def resolve(p):
        return None if p is None else str((base / p) if not Path(p).is_absolute() else Path(p))

    try:
        solver = SolverConfig(**doc.get("solver", {}))
        sel = doc.get("select", {})
        selection = SelectionConfig.create(sel.get("ratio", 0.4), sel.get("tau"), sel.get("delta"),
                                           seed=int(doc.get("seed", 0)),
                                           standardize=bool(sel.get("standardize", True)))
        sc = doc.get("scorer", {})
        pr = doc.get("proxy", {})
        cfg = PipelineConfig(
            corpus=resolve(paths["corpus"]),
            downstream=resolve(paths["downstream"]),
            out=resolve(paths["out"]),
            vocab=resolve(paths.get("vocab")),
            tokenizer=doc.get("corpus", {}).get("tokenizer", "whitespace"),
            proxy_size=int(pr.get("size", 64)),
            pretrain_steps=int(pr.get("pretrain_steps", 500)),
            init_scale=float(pr.get("init_scale", 0.0)),
            solver=solver,
            extractor_dim=int(sc.get("dim", 256)),
            extractor_orders=tuple(int(o) for o in sc.get("orders", (1, 2))),
            scorer_regs=tuple(float(r) for r in sc.get("regs", (1e-6, 1e-4, 1e-2, 1.0))),
            val_fraction=float(sc.get("val_fraction", 0.1)),
            selection=selection,
            seed=int(doc.get("seed", 0)),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


# -- proxy sampling --------------------------------------------------------------

def sample_proxy(corpus: Dataset, size: int, seed: int) -> Dataset:
    """Uniform sample without replacement, kept in original-id order."""
    if size > len(corpus):
        raise ConfigError(f"proxy size {size} exceeds corpus size {len(corpus)}")
    if size < 1:
        raise ConfigError("proxy size must be >= 1")
    idx = np.sort(np.random.default_rng(seed).choice(len(corpus), size=size, replace=False))
    return corpus.subset(idx, role="proxy")


# -- staged runner -------------------------------------------------------------

class _Stages:
    def __init__(self, out: Path, force: bool):
        self.out = out
        self.force = force
        self.state_path = out / "stages.json"
        self.state = json.loads(self.state_path.read_text()) if self.state_path.exists() else {}
        self.timings: dict[str, float] = {}
        self.skipped: list[str] = []

    def key(self, name: str, payload) -> str:
        return hashlib.sha256(json.dumps([name, payload], sort_keys=True, default=str).encode()).hexdigest()

    def fresh(self, name: str, key: str) -> bool:
        rec = self.state.get(name)
        if self.force or rec is None or rec["key"] != key:
            return False
        for rel, dig in rec["outputs"].items():
            p = self.out / rel
            if not p.exists() or file_digest(p) != dig:
                return False
        return True

    def run(self, name: str, key: str, fn, outputs: list[str]):
        if self.fresh(name, key):
            self.skipped.append(name)
            self.timings[name] = 0.0
            return
        t0 = time.perf_counter()
        try:
            fn()
        except NumericalError as exc:
            exc.stage = exc.stage or name
            raise
        except OCDSError as exc:
            raise type(exc)(f"[stage {name}] {exc}") from exc
        self.timings[name] = time.perf_counter() - t0
        self.state[name] = {"key": key, "outputs": {rel: file_digest(self.out / rel) for rel in outputs}}
        self.state_path.write_text(json.dumps(self.state, indent=2, sort_keys=True) + "\n")

    def digests(self, name: str) -> dict:
        return self.state[name]["outputs"]


def _load_data(cfg: PipelineConfig):
    corpus, vocab_size = load_corpus(cfg.corpus, cfg.vocab, cfg.tokenizer, role="corpus")
    downstream, v2 = load_corpus(cfg.downstream, cfg.vocab, cfg.tokenizer, role="downstream")
    return corpus, downstream, max(vocab_size, v2)


def _write_ids(path, proxy: Dataset):
    lines = ["proxy_index\tinstance_id"] + [f"{i}\t{int(o)}" for i, o in enumerate(proxy.origin)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_ids(path) -> np.ndarray:
    rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    return np.array([int(r.split("\t")[1]) for r in rows if r.strip()], dtype=np.int64)


def run_pipeline(cfg: PipelineConfig, force: bool = False) -> dict:
    """Run every stage and return the run manifest (also written to ``manifest.json``)."""
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stages = _Stages(out, force)
    corpus, downstream, vocab_size = _load_data(cfg)
    model = BigramModel(vocab_size)
    J = DownstreamLoss(downstream)
    inputs = {"corpus": file_digest(cfg.corpus), "downstream": file_digest(cfg.downstream),
              "vocab": file_digest(cfg.vocab) if cfg.vocab else None}

    # 1. proxy sample
    proxy_key = stages.key("proxy", [inputs, cfg.proxy_size, cfg.seed])

    def do_proxy():
        proxy = sample_proxy(corpus, cfg.proxy_size, derive_seed(cfg.seed, "proxy"))
        _write_ids(out / "proxy_ids.tsv", proxy)

    stages.run("proxy", proxy_key, do_proxy, ["proxy_ids.tsv"])
    proxy = corpus.subset(_read_ids(out / "proxy_ids.tsv"), role="proxy")

    # 2. proxy pre-training and checkpoint harvest
    M = cfg.solver.n_checkpoints
    ck_names = [f"checkpoints/ckpt_{m:06d}.bin" for m in range(M)]
    ck_key = stages.key("checkpoints", [inputs, cfg.pretrain_steps, cfg.init_scale, asdict(cfg.solver), cfg.seed])

    def do_checkpoints():
        rng = np.random.default_rng(derive_seed(cfg.seed, "init"))
        theta_init = model.init_params(rng, cfg.init_scale)
        batch = BatchConfig(cfg.solver.batch_size, derive_seed(cfg.seed, "pretrain"))
        cks = harvest_checkpoints(model, corpus, theta_init, cfg.pretrain_steps, M, cfg.solver.lr, batch)
        (out / "checkpoints").mkdir(exist_ok=True)
        for name, ck in zip(ck_names, cks):
            write_checkpoint(out / name, ck)

    stages.run("checkpoints", ck_key, do_checkpoints, ck_names)

    # 3. quality scores
    solver = replace(cfg.solver, seed=derive_seed(cfg.seed, "solver"))
    score_key = stages.key("scores", [stages.digests("proxy"), stages.digests("checkpoints"), asdict(solver)])

    def do_scores():
        cks = [read_checkpoint(out / n) for n in ck_names]
        gamma = multi_checkpoint_scores(model, proxy, J, cks, solver)
        write_scores(out / "gamma.tsv", gamma, "gamma", ids=proxy.origin)

    stages.run("scores", score_key, do_scores, ["gamma.tsv"])

    # 4. scorer
    extractor = HashedNgramExtractor(cfg.extractor_dim, cfg.extractor_orders)
    scorer_key = stages.key("scorer", [stages.digests("scores"), extractor.config_hash(),
                                       list(cfg.scorer_regs), cfg.val_fraction, cfg.seed])

    def do_scorer():
        from ocds.pmp import read_scores
        ids, gamma = read_scores(out / "gamma.tsv")
        order = np.argsort(ids)
        fitted = fit_scorer(proxy, gamma[order], extractor, cfg.scorer_regs, cfg.val_fraction,
                            derive_seed(cfg.seed, "scorer"))
        fitted.save(out / "scorer.json")

    stages.run("scorer", scorer_key, do_scorer, ["scorer.json"])

    # 5. inference
    infer_key = stages.key("infer", [stages.digests("scorer"), inputs])

    def do_infer():
        sm = ScorerModel.load(out / "scorer.json")
        write_scores(out / "inferred.tsv", infer_scores(sm, corpus), "score", ids=corpus.origin)

    stages.run("infer", infer_key, do_infer, ["inferred.tsv"])

    # 6. selection and materialization
    sel_cfg = replace(cfg.selection, seed=derive_seed(cfg.seed, "select"))
    select_key = stages.key("select", [stages.digests("infer"), asdict(sel_cfg)])

    def do_select():
        from ocds.pmp import read_scores
        _, scores = read_scores(out / "inferred.tsv")
        result = gumbel_topk(scores, sel_cfg)
        write_selection(out / "selection.tsv", result)
        materialize(corpus, result, out / "selected.bin", vocab_size)

    stages.run("select", select_key, do_select,
               ["selection.tsv", "selection.tsv.manifest.json", "selected.bin", "selected.bin.ids.tsv"])

    manifest = {
        "config": cfg.echo(),
        "inputs": inputs,
        "artifacts": {name: rec["outputs"] for name, rec in sorted(stages.state.items())},
        "timings": stages.timings,
        "skipped": stages.skipped,
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


# -- planted-signal fixture ------------------------------------------------------

@dataclass(frozen=True)
class FixtureConfig:
    """Half clean Markov-chain sequences, half token-shuffled copies."""

    n_instances: int = 64
    n_downstream: int = 16
    vocab_size: int = 8
    seq_len: int = 16
    follow_prob: float = 0.9
    seed: int = 0


@dataclass
class PlantedFixture:
    """``quality`` is each instance's fraction of chain-following transitions."""

    corpus: Dataset
    downstream: Dataset
    clean: np.ndarray
    vocab_size: int
    quality: np.ndarray


def chain_fraction(seq, vocab_size: int) -> float:
    seq = np.asarray(seq, dtype=np.int64)
    if seq.size < 2:
        return 0.0
    return float(np.mean((seq[1:] - seq[:-1]) % vocab_size == 1))


def _clean_sequence(rng, V, length, p):
    seq = np.empty(length, dtype=np.int64)
    seq[0] = rng.integers(V)
    for i in range(1, length):
        seq[i] = (seq[i - 1] + 1) % V if rng.random() < p else rng.integers(V)
    return seq


def planted_fixture(cfg: FixtureConfig = FixtureConfig()) -> PlantedFixture:
    rng = np.random.default_rng(cfg.seed)
    n_clean = cfg.n_instances // 2
    clean_mask = np.zeros(cfg.n_instances, dtype=bool)
    clean_mask[rng.permutation(cfg.n_instances)[:n_clean]] = True
    seqs = []
    for is_clean in clean_mask:
        s = _clean_sequence(rng, cfg.vocab_size, cfg.seq_len, cfg.follow_prob)
        seqs.append(s if is_clean else rng.permutation(s))
    down = [_clean_sequence(rng, cfg.vocab_size, cfg.seq_len, cfg.follow_prob) for _ in range(cfg.n_downstream)]
    quality = np.array([chain_fraction(x, cfg.vocab_size) for x in seqs])
    return PlantedFixture(Dataset.from_payloads(seqs, role="corpus"),
                          Dataset.from_payloads(down, role="downstream"),
                          clean_mask, cfg.vocab_size, quality)


def write_fixture(fx: PlantedFixture, directory) -> dict:
    """Write the fixture as text corpora plus a vocabulary; returns the paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary([f"t{i}" for i in range(fx.vocab_size)])
    vocab.save(d / "vocab.txt")
    for name, data in (("corpus.txt", fx.corpus), ("downstream.txt", fx.downstream)):
        (d / name).write_text("".join(vocab.decode(x.payload) + "\n" for x in data), encoding="utf-8")
    (d / "clean.tsv").write_text("instance_id\tclean\tquality\n"
                                 + "".join(f"{i}\t{int(c)}\t{float(q)!r}\n" for i, (c, q) in enumerate(zip(fx.clean, fx.quality))))
    return {"corpus": d / "corpus.txt", "downstream": d / "downstream.txt", "vocab": d / "vocab.txt"}


# -- exact vs efficient simulation ---------------------------------------------

@dataclass(frozen=True)
class SimulationConfig:
    fixture: FixtureConfig = field(default_factory=FixtureConfig)
    lr: float = 0.1
    exact_steps: int = 100
    exact_epochs: int = 5
    exact_outer_lr: float = 1e-6
    efficient_steps: int = 20
    efficient_batch: int = 8
    n_checkpoints: int = 5
    pretrain_steps: int = 100
    efficient_outer_lr: float = 1e-6
    eval_steps: int = 100
    ratio: float = 0.5


def _selection_auc(model: Model, corpus: Dataset, J: DownstreamLoss, gamma, ratio, steps, lr):
    sel = gumbel_topk(gamma, SelectionConfig(ratio, 0.0, 0))
    sub = corpus.subset(sel.ids)
    traj = train(model, sub, np.full(len(sub), 1.0 / len(sub)), np.zeros(model.n_params), steps,
                 OptimizerConfig("gd", lr))
    curve = [J.value(model, traj.checkpoints[t]) for t in range(1, steps + 1)]
    return sel.ids, curve, compute_auc(curve)


def simulate_exact_vs_efficient(cfg: SimulationConfig = SimulationConfig()) -> dict:
    """Solve scores exactly (multi-epoch, full batch) and efficiently (one epoch,
    averaged checkpoints, mini-batches); compare selections by downstream AUC."""
    fx = planted_fixture(cfg.fixture)
    if len(fx.corpus) > 256 or cfg.exact_steps > 200:
        raise ConfigError("simulation fixture too large for the exact solver (|D| <= 256, T <= 200)")
    model = BigramModel(fx.vocab_size)
    J = DownstreamLoss(fx.downstream)
    theta0 = np.zeros(model.n_params)
    n = len(fx.corpus)
    tokens = float(sum(len(x.payload) for x in fx.corpus))
    seed = cfg.fixture.seed

    exact_cfg = SolverConfig(lr=cfg.lr, outer_lr=cfg.exact_outer_lr, steps=cfg.exact_steps,
                             outer_epochs=cfg.exact_epochs, batch_size=None, seed=seed)
    t0 = time.perf_counter()
    g_exact = pmp_solve(model, fx.corpus, J, theta0, exact_cfg)
    t_exact = time.perf_counter() - t0

    eff_cfg = SolverConfig(lr=cfg.lr, outer_lr=cfg.efficient_outer_lr, steps=cfg.efficient_steps,
                           outer_epochs=1, n_checkpoints=cfg.n_checkpoints,
                           batch_size=cfg.efficient_batch, seed=derive_seed(seed, "solver"))
    t0 = time.perf_counter()
    cks = harvest_checkpoints(model, fx.corpus, theta0, cfg.pretrain_steps, cfg.n_checkpoints, cfg.lr,
                              BatchConfig(cfg.efficient_batch, derive_seed(seed, "pretrain")))
    g_eff = multi_checkpoint_scores(model, fx.corpus, J, cks, eff_cfg)
    t_eff = time.perf_counter() - t0

    per_step_batch = tokens * min(cfg.efficient_batch, n) / n
    N = model.n_params
    exact_flops = estimate_flops(N, tokens, N, tokens * cfg.exact_steps, 1, cfg.exact_epochs)
    exact_solver = exact_flops["solver"] - exact_flops["solver_breakdown"]["proxy_pretrain"]
    eff_flops = estimate_flops(N, per_step_batch * cfg.pretrain_steps, N, per_step_batch * cfg.efficient_steps,
                               1, cfg.n_checkpoints)["solver"]

    record = {"config": asdict(cfg), "variants": {}}
    for name, gamma, flops, secs in (("exact", g_exact, exact_solver, t_exact),
                                     ("efficient", g_eff, eff_flops, t_eff),
                                     ("uniform", np.full(n, 1.0 / n), 0.0, 0.0)):
        if name == "uniform":
            traj = train(model, fx.corpus, gamma, theta0, cfg.eval_steps, OptimizerConfig("gd", cfg.lr))
            curve = [J.value(model, traj.checkpoints[t]) for t in range(1, cfg.eval_steps + 1)]
            ids, auc = np.arange(n), compute_auc(curve)
        else:
            ids, curve, auc = _selection_auc(model, fx.corpus, J, gamma, cfg.ratio, cfg.eval_steps, cfg.lr)
        record["variants"][name] = {
            "gamma": gamma.tolist(),
            "selected": ids.tolist(),
            "clean_precision": float(fx.clean[ids].mean()),
            "curve": curve,
            "auc": auc,
            "solver_flops": flops,
            "seconds": secs,
        }
    try:
        record["gamma_clean_spearman"] = spearman(g_eff, fx.clean.astype(float))
    except OCDSError:
        record["gamma_clean_spearman"] = None
    return record
