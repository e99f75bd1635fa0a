"""Stage orchestration: data -> features -> pretrain -> IM fine-tune -> pools -> selection -> evaluation.

Every stage draws from its own named child stream of the master seed, so a
stage's output does not depend on which other stages ran before it.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .datasets_features import LabeledDataset, fit_feature_extractor, generate_gmm, make_distilled, write_feature_csv
from .denoiser import DenoiserParams, init_denoiser, save_checkpoint
from .eval_harness import EvalRecipe, EvalReport, train_and_eval, write_results_csv, write_summary_csv
from .im_finetune import IMFinetuneConfig, finetune, write_loss_log
from .instability_probe import probe_flow
from .math_core import Rng
from .schedule import build_linear_schedule
from .sss_select import CandidatePool, build_pool, select_greedy, select_random, with_reference

logger = logging.getLogger(__name__)

METHODS = ("random_real", "vanilla", "im_only", "s3_only", "im_s3")
SWEEP_AXES = ("lambda_im", "alpha_beta_grid", "G", "K_i")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str, timings: dict | None = None):
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    finally:
        if timings is not None:
            timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


def params_hash(params: DenoiserParams) -> str:
    h = hashlib.sha256()
    for k in sorted(params.tensors):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params.tensors[k], dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def dataset_hash(ds: LabeledDataset) -> str:
    h = hashlib.sha256(np.ascontiguousarray(ds.X, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(ds.y, dtype="<i8").tobytes())
    return h.hexdigest()[:16]


class Experiment:
    """Lazily computed, cached pipeline stages for one config."""

    def __init__(self, cfg: ExperimentConfig):
        cfg.validate()
        self.cfg = cfg
        self.root = Rng(cfg.seed)
        self.timings: dict[str, float] = {}
        self._finetuned: dict[float, tuple] = {}
        self._pools: dict[tuple, CandidatePool] = {}
        self._evals: dict[tuple, list[float]] = {}

    @cached_property
    def schedule(self):
        s = self.cfg.schedule
        return build_linear_schedule(s.T, s.beta_start, s.beta_end)

    @cached_property
    def data(self) -> tuple[LabeledDataset, LabeledDataset]:
        with stage("data", self.timings):
            return generate_gmm(self.cfg.gmm, self.root.spawn("data"))

    @cached_property
    def extractor(self):
        f = self.cfg.features
        with stage("features", self.timings):
            return fit_feature_extractor(self.data[0], self.root.spawn("features"), hidden=f.hidden,
                                         epochs=f.epochs, batch_size=f.batch_size, lr=f.lr)

    @cached_property
    def real_features_by_class(self) -> list[np.ndarray]:
        train = self.data[0]
        return [self.extractor(train.of_class(c)) for c in range(self.cfg.gmm.C)]

    @cached_property
    def pretrained(self):
        c = self.cfg
        with stage("pretrain", self.timings):
            params = init_denoiser(c.gmm.d, c.gmm.C, c.schedule.T, self.root.spawn("init"),
                                   hidden=c.denoiser.hidden, n_freq=c.denoiser.n_freq, emb_dim=c.denoiser.emb_dim)
            pcfg = IMFinetuneConfig(lambda_im=0.0, epochs=c.pretrain.epochs, batch_size=c.pretrain.batch_size,
                                    lr=c.pretrain.lr)
            train = self.data[0]
            params, _, log = finetune(params, self.schedule, train.X, train.y, pcfg, self.root.spawn("pretrain"))
            return params, log

    def finetuned(self, lambda_im: float | None = None):
        lam = self.cfg.finetune.lambda_im if lambda_im is None else float(lambda_im)
        if lam not in self._finetuned:
            base, _ = self.pretrained
            with stage("finetune", self.timings):
                fcfg = replace(self.cfg.finetune, lambda_im=lam)
                train = self.data[0]
                self._finetuned[lam] = finetune(base.copy(), self.schedule, train.X, train.y, fcfg,
                                                self.root.spawn("finetune"))[::2]
        return self._finetuned[lam]

    def generator(self, which: str, lambda_im: float | None = None) -> DenoiserParams:
        if which == "base":
            return self.pretrained[0]
        if which == "im":
            return self.finetuned(lambda_im)[0]
        raise ValueError(f"unknown generator {which!r}")

    def pool(self, which: str, G: int | None = None, K_i: int | None = -1,
             lambda_im: float | None = None) -> CandidatePool:
        s = self.cfg.selection
        G = s.G if G is None else G
        K_i = s.K_i if K_i == -1 else K_i
        lam = self.cfg.finetune.lambda_im if lambda_im is None else lambda_im
        key = (which, G, lam if which == "im" else None)
        if key not in self._pools:
            gen = self.generator(which, lambda_im)
            with stage("pool", self.timings):
                # identical noise for both generators: paired comparison
                self._pools[key] = build_pool(self.schedule, gen, self.real_features_by_class, self.extractor,
                                              G, s.ipc, K_i, self.root.spawn("pool"), n_steps=s.sample_steps)
        pool = self._pools[key]
        if K_i != s.K_i:
            pool = with_reference(pool, self.real_features_by_class, K_i, self.root.spawn("pool").spawn("reference"))
        return pool

    def random_assignment(self, pool: CandidatePool) -> list[int]:
        return select_random(pool, self.root.spawn("random-subgroup"))

    def random_real(self) -> LabeledDataset:
        rng = self.root.spawn("random-real")
        train = self.data[0]
        picks = []
        for c in range(self.cfg.gmm.C):
            Xc = train.of_class(c)
            picks.append(Xc[rng.choice(len(Xc), self.cfg.selection.ipc)])
        return make_distilled(picks, self.cfg.selection.ipc, self.cfg.gmm.C)

    def distilled(self, pool: CandidatePool, g: list[int]) -> LabeledDataset:
        return make_distilled([pool.subgroup(i, gi) for i, gi in enumerate(g)], pool.K, pool.C)

    @property
    def recipe(self) -> EvalRecipe:
        e = self.cfg.eval
        return EvalRecipe(hidden=e.hidden, epochs=e.epochs, batch_size=e.batch_size, lr=e.lr)

    def evaluate(self, name: str, ds: LabeledDataset) -> EvalReport:
        seeds = list(self.cfg.eval.seeds)
        key = (dataset_hash(ds), tuple(seeds))
        with stage("eval", self.timings):
            if key not in self._evals:
                self._evals[key] = [train_and_eval(ds, self.data[1], s, self.recipe) for s in seeds]
        return EvalReport(name, list(self._evals[key]), seeds, self.recipe.fingerprint(), self.cfg.selection.ipc)

    def method_datasets(self) -> tuple[dict[str, LabeledDataset], dict[str, list[int]]]:
        s = self.cfg.selection
        base_pool, im_pool = self.pool("base"), self.pool("im")
        with stage("select", self.timings):
            g_rand = self.random_assignment(base_pool)
            g_base = select_greedy(base_pool, s.alpha, s.beta).g
            g_im = select_greedy(im_pool, s.alpha, s.beta).g
        assignments = {"vanilla": g_rand, "im_only": g_rand, "s3_only": g_base, "im_s3": g_im}
        datasets = {
            "random_real": self.random_real(),
            "vanilla": self.distilled(base_pool, g_rand),
            "im_only": self.distilled(im_pool, g_rand),
            "s3_only": self.distilled(base_pool, g_base),
            "im_s3": self.distilled(im_pool, g_im),
        }
        return datasets, assignments


def _sha_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_pipeline(cfg: ExperimentConfig, out_dir=None, exp: Experiment | None = None) -> Path:
    """Run every stage and write artifacts; returns the output directory."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    exp = exp or Experiment(cfg)
    (out / "config.json").write_text(cfg.to_json() + "\n")

    train, test = exp.data
    with stage("write", exp.timings):
        train.to_csv(out / "train.csv")
        test.to_csv(out / "test.csv")
    base, pre_log = exp.pretrained
    ft, ft_log = exp.finetuned()
    with stage("write", exp.timings):
        save_checkpoint(base, out / "denoiser_base.ckpt")
        save_checkpoint(ft, out / "denoiser_im.ckpt")
        write_loss_log(out / "pretrain_log.csv", pre_log)
        write_loss_log(out / "finetune_log.csv", ft_log)

    datasets, assignments = exp.method_datasets()
    s = cfg.selection
    with stage("write", exp.timings):
        for which in ("base", "im"):
            pool = exp.pool(which)
            pool.to_csv(out / f"pool_{which}_centroids.csv", out / f"pool_{which}_members.csv")
            sel = select_greedy(pool, s.alpha, s.beta)
            sel.to_json(out / f"assignment_{which}.json")
        for name, ds in datasets.items():
            ds.to_csv(out / f"distilled_{name}.csv")

    reports = [exp.evaluate(name, datasets[name]) for name in METHODS]
    with stage("write", exp.timings):
        write_results_csv(out / "results.csv", reports)
        write_summary_csv(out / "summary.csv", reports)
        manifest = {
            "config_hash": cfg.fingerprint(),
            "seed": cfg.seed,
            "methods": [{"method": r.method, "ipc": r.ipc, "mean": r.mean, "std": r.std,
                         "accuracies": r.accuracies} for r in reports],
            "assignments": assignments,
            "generators": {"base": params_hash(base), "im": params_hash(ft)},
            "eval_recipe": asdict(exp.recipe),
            "files": {p.name: _sha_file(p) for p in sorted(out.iterdir())
                      if p.is_file() and p.name not in ("manifest.json", "timings.json")},
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        (out / "timings.json").write_text(json.dumps(exp.timings, indent=2, sort_keys=True) + "\n")
    return out


def run_sweep(cfg: ExperimentConfig, axis: str, values, out_path=None, exp: Experiment | None = None) -> list[dict]:
    """One row per value: the IM+selection method's accuracy under that setting.

    ``lambda_im`` retrains the fine-tuned generator per value; the other axes
    reuse a single fine-tuned generator and only rerun selection (plus pool
    sampling once per distinct G).
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    exp = exp or Experiment(cfg)
    s = cfg.selection
    rows = []
    for v in values:
        alpha, beta, lam, G, K_i = s.alpha, s.beta, None, None, -1
        if axis == "lambda_im":
            lam = float(v)
        elif axis == "alpha_beta_grid":
            alpha, beta = (float(x) for x in v)
        elif axis == "G":
            G = int(v)
        else:
            K_i = None if v is None else int(v)
        pool = exp.pool("im", G=G, K_i=K_i, lambda_im=lam)
        sel = select_greedy(pool, alpha, beta)
        rep = exp.evaluate("im_s3", exp.distilled(pool, sel.g))
        rows.append({"axis": axis, "value": json.dumps(v), "alpha": alpha, "beta": beta,
                     "mean": rep.mean, "std": rep.std, "assignment": " ".join(map(str, sel.g)),
                     "generator": params_hash(exp.generator("im", lam))})
    if out_path is not None:
        with open(Path(out_path), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return rows


def alpha_beta_grid(lo: float = 0.1, hi: float = 0.9, n: int = 9) -> list[tuple[float, float]]:
    vals = [round(v, 10) for v in np.linspace(lo, hi, n)]
    return [(a, b) for a in vals for b in vals]


def run_instability(exp: Experiment, which: str, class_id: int, n_probes: int, n_steps: int = 20, h: float = 1e-4):
    with stage("instability", exp.timings):
        return probe_flow(exp.schedule, exp.generator(which), class_id, n_probes,
                          exp.root.spawn(f"instability-{which}-{class_id}"), n_steps=n_steps, h=h)


def export_embeddings(exp: Experiment, out: Path) -> list[Path]:
    """Feature CSVs of the real train split and of every pool member, for external plotting."""
    out.mkdir(parents=True, exist_ok=True)
    train = exp.data[0]
    paths = [out / "embeddings_real.csv"]
    write_feature_csv(paths[0], exp.extractor(train.X), train.y)
    for which in ("base", "im"):
        pool = exp.pool(which)
        F = pool.member_features
        labels = np.repeat(np.arange(pool.C), F.shape[1] * F.shape[2])
        p = out / f"embeddings_pool_{which}.csv"
        write_feature_csv(p, F.reshape(-1, F.shape[-1]), labels)
        paths.append(p)
    return paths
