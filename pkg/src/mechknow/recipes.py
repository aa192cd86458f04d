"""Named experiment recipes and the run manifest.

Each recipe reproduces one study end to end: it trains (or loads) what it
needs, evaluates, writes metrics/plots/checkpoints under its own run
directory, and returns a manifest. Recipes are plain functions of
(ExperimentConfig, run_dir); the registry maps public names to them.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import ced as cedmod
from . import data as dmod
from . import evaluation as evmod
from . import nets, training
from . import transforms as tf
from .config import ExperimentConfig, build_config
from .transforms import ConfigurationError


class MissingDependencyError(RuntimeError):
    """An upstream artifact is absent; the message names the producing recipe."""


@dataclass
class RunManifest:
    recipe: str
    config: dict
    code_version: str
    started_at: str
    elapsed_s: float
    artifacts: list
    metrics: dict

    def save(self, path: Path) -> None:
        payload = asdict(self)
        payload["config"] = {k: str(v) if isinstance(v, Path) else v for k, v in payload["config"].items()}
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(payload, indent=2, default=float))
        tmp.replace(path)


def code_version() -> str:
    """Content hash of the package sources, so manifests pin the code state."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# shared helpers


def _ckpt_path(cfg: ExperimentConfig, experiment: str, kind: str, family: str) -> Path:
    return Path(cfg.checkpoint_dir) / f"{experiment}_{kind}_{family}.ckpt"


def _classifier_ckpt(cfg: ExperimentConfig) -> Path:
    return Path(cfg.checkpoint_dir) / "classifier_mnist_vanilla.ckpt"


def _identifier_ckpt(cfg: ExperimentConfig) -> Path:
    return Path(cfg.checkpoint_dir) / f"{dmod.EXP_NOISE}_identity_factornet.ckpt"


def _require_ckpt(path: Path, producer: str) -> Path:
    if not Path(path).exists():
        raise MissingDependencyError(
            f"checkpoint {path} not found; run the {producer!r} recipe first"
        )
    return Path(path)


def _stream_cfg(cfg: ExperimentConfig, epochs: Optional[int] = None) -> dmod.StreamConfig:
    return dmod.StreamConfig(
        epochs=cfg.epochs if epochs is None else epochs,
        pairs_per_epoch=cfg.scaled_pairs(),
        image_limit=cfg.image_limit,
        p_black=cfg.p_black,
        heldout_class=cfg.heldout_class,
        cache_dir=Path(cfg.cache_dir),
    )


def _train_cfg(cfg: ExperimentConfig, loss: str = "mse") -> training.TrainConfig:
    return training.TrainConfig(
        epochs=1,  # the stream already spans cfg.epochs passes
        batch_size=cfg.batch_size,
        step_size=cfg.step_size,
        seed=cfg.seed,
        loss=loss,
        eval_every=cfg.eval_every,
    )


def _train_source(experiment: str, cfg: ExperimentConfig) -> str:
    if experiment == dmod.EXP_NOISE:
        return "noise"
    return dmod._EXP_SOURCES[(experiment, "train")]


def train_family_estimator(
    cfg: ExperimentConfig,
    experiment: str,
    kind: str,
    family: str,
    ckpt: Optional[Path] = None,
    curve_path: Optional[Path] = None,
):
    spec = nets.ModelSpec(family, experiment, kind)
    stream = dmod.build_experiment_stream(
        experiment, "train", kind, cfg.batch_size, np.random.default_rng(cfg.seed), _stream_cfg(cfg)
    )
    model, curve = training.train_estimator(
        spec,
        stream,
        _train_cfg(cfg),
        train_source=_train_source(experiment, cfg),
        checkpoint_path=ckpt,
    )
    if curve_path is not None:
        curve.save(curve_path)
    return model, curve


def eval_estimator_streams(cfg: ExperimentConfig, model, experiment: str, kind: str):
    """Train/test APE for a fitted estimator.

    Image-backed experiments replay the exact fixed pair set the model
    trained on (same seed and sizing), so a memorizing family keeps its
    in-domain credit; the noise experiment trains on fresh draws every
    epoch, so its train-split metric uses a fresh draw too.
    """
    eval_scfg = dmod.StreamConfig(
        epochs=1,
        pairs_per_epoch=cfg.eval_samples,
        image_limit=cfg.image_limit,
        p_black=cfg.p_black,
        heldout_class=cfg.heldout_class,
        cache_dir=Path(cfg.cache_dir),
    )
    if experiment == dmod.EXP_NOISE:
        train_stream = dmod.build_experiment_stream(
            experiment, "train", kind, 256, np.random.default_rng(cfg.seed + 101), eval_scfg
        )
    else:
        train_stream = dmod.build_experiment_stream(
            experiment, "train", kind, 256, np.random.default_rng(cfg.seed), _stream_cfg(cfg, epochs=1)
        )
    test_stream = dmod.build_experiment_stream(
        experiment, "test", kind, 256, np.random.default_rng(cfg.seed + 202), eval_scfg
    )
    return evmod.evaluate_estimator(model, train_stream, test_stream, max_samples=cfg.eval_samples)


def _summary_metrics(ev: evmod.EstimatorEvaluation) -> dict:
    return {
        "train_median_ape": [round(float(v), 3) for v in ev.train.median],
        "train_q3_ape": [round(float(v), 3) for v in ev.train.q3],
        "test_median_ape": [round(float(v), 3) for v in ev.test.median],
        "test_q3_ape": [round(float(v), 3) for v in ev.test.q3],
    }


# ---------------------------------------------------------------------------
# recipe bodies


def _estimator_recipe(experiment: str, kind: str) -> Callable:
    def run(cfg: ExperimentConfig, run_dir: Path) -> dict:
        ckpt = _ckpt_path(cfg, experiment, kind, cfg.family)
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        model, curve = train_family_estimator(
            cfg, experiment, kind, cfg.family, ckpt, run_dir / "curve.csv"
        )
        ev = eval_estimator_streams(cfg, model, experiment, kind)
        plots = evmod.emit_plots(
            {
                "ape": {"train": ev.train, "test": ev.test},
                "scatter_test": ev.scatter["test"],
                "curve": {cfg.family: curve},
            },
            run_dir,
        )
        return {
            "metrics": {**_summary_metrics(ev), "final_loss": model.training_meta["final_loss"]},
            "artifacts": [run_dir / "curve.csv", ckpt, *plots],
        }

    return run


def run_model_comparison(cfg: ExperimentConfig, run_dir: Path) -> dict:
    """All three families on one mechanism/experiment, same stream seeds."""
    metrics, summaries, artifacts = {}, {}, []
    for family in nets.FAMILIES:
        model, curve = train_family_estimator(cfg, cfg.experiment, cfg.kind, family)
        ev = eval_estimator_streams(cfg, model, cfg.experiment, cfg.kind)
        metrics[family] = _summary_metrics(ev)
        summaries[f"{family}-train"] = ev.train
        summaries[f"{family}-test"] = ev.test
    artifacts += evmod.emit_plots({"ape_by_family": summaries}, run_dir)
    return {"metrics": metrics, "artifacts": artifacts}


def run_learning_curves(cfg: ExperimentConfig, run_dir: Path) -> dict:
    curves, artifacts = {}, []
    for family in nets.FAMILIES:
        _, curve = train_family_estimator(cfg, cfg.experiment, cfg.kind, family)
        path = run_dir / f"curve_{family}.csv"
        curve.save(path)
        artifacts.append(path)
        curves[family] = curve
    artifacts += evmod.emit_plots({"curves": curves}, run_dir)
    final = {fam: curves[fam].points[-1][1] for fam in curves}
    return {"metrics": {"final_train_loss": final}, "artifacts": artifacts}


def run_joint_vs_individual(cfg: ExperimentConfig, run_dir: Path) -> dict:
    """Joint-learning Q3 per parameter against the individual estimators."""
    exp = cfg.experiment
    metrics, artifacts = {}, []
    joint_model, _ = train_family_estimator(cfg, exp, tf.JOINT, cfg.family)
    joint_ev = eval_estimator_streams(cfg, joint_model, exp, tf.JOINT)
    # joint parameter layout: [angle, tx, ty, scale]
    joint_q3 = {
        tf.ROTATION: float(joint_ev.test.q3[0]),
        tf.TRANSLATION: float(np.mean(joint_ev.test.q3[1:3])),
        tf.SCALING: float(joint_ev.test.q3[3]),
    }
    indiv_q3 = {}
    for kind in (tf.ROTATION, tf.SCALING, tf.TRANSLATION):
        model, _ = train_family_estimator(cfg, exp, kind, cfg.family)
        ev = eval_estimator_streams(cfg, model, exp, kind)
        indiv_q3[kind] = float(np.mean(ev.test.q3))
    metrics = {
        "joint_test_q3": joint_q3,
        "individual_test_q3": indiv_q3,
        "joint_worse": {k: joint_q3[k] > indiv_q3[k] for k in indiv_q3},
    }
    artifacts += evmod.emit_plots(
        {
            "joint_vs_individual": {
                **{f"joint-{k}": v for k, v in joint_q3.items()},
                **{f"indiv-{k}": v for k, v in indiv_q3.items()},
            }
        },
        run_dir,
    )
    return {"metrics": metrics, "artifacts": artifacts}


def run_identifier_f1(cfg: ExperimentConfig, run_dir: Path) -> dict:
    est_ckpt = _require_ckpt(
        _ckpt_path(cfg, dmod.EXP_NOISE, tf.ROTATION, "factornet"), "exp_noise_rotation"
    )
    estimator = nets.load_checkpoint(est_ckpt)
    spec = nets.ModelSpec("factornet", dmod.EXP_NOISE, nets.IDENTITY)
    ckpt = _identifier_ckpt(cfg)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    stream = dmod.build_identity_stream(
        dmod.EXP_NOISE, "train", estimator, cfg.batch_size,
        np.random.default_rng(cfg.seed), _stream_cfg(cfg),
    )
    model, curve = training.train_identifier(
        spec, estimator, stream, _train_cfg(cfg, loss="bce"),
        train_source="noise", checkpoint_path=ckpt,
    )
    scfg = dmod.StreamConfig(
        epochs=1, pairs_per_epoch=cfg.eval_samples, p_black=cfg.p_black,
        cache_dir=Path(cfg.cache_dir),
    )
    f1_in = evmod.evaluate_identifier(
        model,
        dmod.build_identity_stream(
            dmod.EXP_NOISE, "train", estimator, 256, np.random.default_rng(cfg.seed + 11), scfg
        ),
        max_samples=cfg.eval_samples,
    )
    f1_out = evmod.evaluate_identifier(
        model,
        dmod.build_identity_stream(
            dmod.EXP_NOISE, "test", estimator, 256, np.random.default_rng(cfg.seed + 12), scfg
        ),
        max_samples=cfg.eval_samples,
    )
    curve.save(run_dir / "curve.csv")
    artifacts = [ckpt, run_dir / "curve.csv"]
    artifacts += evmod.emit_plots({"f1": {"in_domain": f1_in, "ood": f1_out}}, run_dir)
    return {"metrics": {"f1_in_domain": f1_in, "f1_ood": f1_out}, "artifacts": artifacts}


def run_classifier_baseline(cfg: ExperimentConfig, run_dir: Path) -> dict:
    train_set = dmod.get_image_set("mnist_train", Path(cfg.cache_dir), limit=cfg.image_limit)
    ckpt = _classifier_ckpt(cfg)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    tcfg = training.TrainConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size, step_size=cfg.step_size,
        seed=cfg.seed, loss="cross_entropy", eval_every=cfg.eval_every,
    )
    model = training.train_classifier(
        train_set, tcfg, experiment=dmod.EXP_MNIST,
        curve_path=run_dir / "curve.csv", checkpoint_path=ckpt,
    )
    test_set = dmod.get_image_set("mnist_test", Path(cfg.cache_dir), limit=cfg.test_limit)
    comp = cedmod.Components(classifier=model)
    pcfg = cedmod.PipelineConfig(seed=cfg.seed, limit=cfg.test_limit)
    clean = cedmod.evaluate_pipeline("C", test_set, rotated=False, comp=comp, cfg=pcfg)
    rotated = cedmod.evaluate_pipeline("C", test_set, rotated=True, comp=comp, cfg=pcfg)
    artifacts = [ckpt, run_dir / "curve.csv"]
    artifacts += evmod.emit_plots(
        {"accuracy": {"clean": clean.accuracy, "rotated": rotated.accuracy}}, run_dir
    )
    return {
        "metrics": {"clean_accuracy": clean.accuracy, "rotated_accuracy": rotated.accuracy},
        "artifacts": artifacts,
    }


def load_pipeline_components(cfg: ExperimentConfig) -> cedmod.Components:
    classifier = nets.load_checkpoint(
        _require_ckpt(_classifier_ckpt(cfg), "classifier_baseline")
    )
    estimator = nets.load_checkpoint(
        _require_ckpt(_ckpt_path(cfg, dmod.EXP_NOISE, tf.ROTATION, "factornet"), "exp_noise_rotation")
    )
    identifier = nets.load_checkpoint(_require_ckpt(_identifier_ckpt(cfg), "identifier_f1"))
    train_set = dmod.get_image_set("mnist_train", Path(cfg.cache_dir))
    pool = cedmod.sample_candidate_pool(
        train_set, cfg.n_candidates, np.random.default_rng(cfg.seed + 77)
    )
    return cedmod.Components(classifier, estimator, identifier, pool)


def run_ced_rotated_mnist(cfg: ExperimentConfig, run_dir: Path) -> dict:
    comp = load_pipeline_components(cfg)
    cedmod.check_provenance(comp.estimator)
    cedmod.check_provenance(comp.identifier)
    test_set = dmod.get_image_set("mnist_test", Path(cfg.cache_dir), limit=cfg.test_limit)
    artifacts, metrics = [], {}

    def run_variant(tag, variant, rotated, k):
        log = run_dir / f"{tag}.jsonl"
        res = cedmod.evaluate_pipeline(
            variant, test_set, rotated=rotated, comp=comp,
            cfg=cedmod.PipelineConfig(
                k=k, threshold=cfg.threshold, n_candidates=cfg.n_candidates,
                seed=cfg.seed, limit=cfg.test_limit, log_path=log,
            ),
        )
        artifacts.append(log)
        metrics[tag] = res.accuracy

    run_variant("clean_C", "C", False, cfg.k)
    run_variant("clean_CED10", "CED", False, 10)
    run_variant("rotated_C", "C", True, cfg.k)
    run_variant("rotated_CED5", "CED", True, 5)
    run_variant("rotated_CED10", "CED", True, 10)
    run_variant("rotated_ED", "ED", True, cfg.k)
    run_variant("rotated_CD", "CD", True, 10)
    artifacts += evmod.emit_plots({"accuracy": metrics}, run_dir)
    return {"metrics": metrics, "artifacts": artifacts}


def run_candidate_sweep(cfg: ExperimentConfig, run_dir: Path) -> dict:
    comp = load_pipeline_components(cfg)
    test_set = dmod.get_image_set("mnist_test", Path(cfg.cache_dir), limit=cfg.test_limit)
    ns = [n for n in (1, 5, 10, 20, 50, 100, 200) if n <= cfg.n_candidates]
    sweep = cedmod.candidate_sweep(
        ns, test_set, comp,
        cedmod.PipelineConfig(k=cfg.k, threshold=cfg.threshold, seed=cfg.seed, limit=cfg.test_limit),
    )
    artifacts = evmod.emit_plots({"accuracy_by_n": {str(n): a for n, a in sweep.items()}}, run_dir)
    return {"metrics": {"accuracy_by_n": {str(n): a for n, a in sweep.items()}}, "artifacts": artifacts}


def run_bw_ratio_sweep(cfg: ExperimentConfig, run_dir: Path) -> dict:
    ratios = [0.3, 0.5, 0.7]
    both = evmod.bw_ratio_sweep(
        ratios, cfg.kind, ("mnist", "mnist_b"),
        train_cfg=_train_cfg(cfg), stream_cfg=_stream_cfg(cfg),
        eval_pairs=cfg.eval_samples, seed=cfg.seed, cache_dir=Path(cfg.cache_dir),
    )
    out_m = {r: per["mnist"] for r, per in both.items()}
    out_b = {r: per["mnist_b"] for r, per in both.items()}
    med = lambda s: float(np.mean(s.median))
    metrics = {
        "mnist_median_by_ratio": {str(r): med(s) for r, s in out_m.items()},
        "mnist_b_median_by_ratio": {str(r): med(s) for r, s in out_b.items()},
    }
    artifacts = evmod.emit_plots(
        {"ratio_mnist": {str(r): s for r, s in out_m.items()},
         "ratio_mnist_b": {str(r): s for r, s in out_b.items()}},
        run_dir,
    )
    return {"metrics": metrics, "artifacts": artifacts}


def run_restoration(cfg: ExperimentConfig, run_dir: Path) -> dict:
    ckpt = _require_ckpt(
        _ckpt_path(cfg, dmod.EXP_NOISE, tf.TRANSLATION, "factornet"), "exp_noise_translation"
    )
    estimator = nets.load_checkpoint(ckpt)
    x = np.zeros((28, 28, 1), dtype=np.float32)
    x[11:17, 11:17, 0] = 1.0  # small centered bright square
    targets = [(5, 0), (-5, 0), (0, 5), (0, -5), (0, 0)]
    metrics, artifacts = {}, []
    for tx, ty in targets:
        theta = tf.normalize_params(tf.TransformParams(tf.TRANSLATION, tx_px=tx, ty_px=ty))
        res = evmod.restore_by_gradient(estimator, x, theta)
        tag = f"tx{tx}_ty{ty}"
        metrics[tag] = {
            "offset_px": [round(v, 3) for v in res.com_offset_px],
            "final_loss": round(res.loss_trace[-1], 6),
            "mae_vs_initial": round(float(np.abs(res.final - res.initial).mean()), 5),
        }
        np.save(run_dir / f"restored_{tag}.npy", res.final)
        artifacts.append(run_dir / f"restored_{tag}.npy")
    return {"metrics": metrics, "artifacts": artifacts}


# ---------------------------------------------------------------------------
# registry


@dataclass(frozen=True)
class Recipe:
    name: str
    fn: Callable
    anchor: str  # plain-language description of the study it reproduces
    deps: tuple = ()
    defaults: dict = field(default_factory=dict)


def _registry() -> dict:
    recipes = []
    est_budgets = {
        dmod.EXP_NOISE: {"epochs": 60, "pairs_per_epoch": 8192, "p_black": 0.7},
        dmod.EXP_MNIST: {"epochs": 30, "pairs_per_epoch": 8192},
        dmod.EXP_CIFAR: {"epochs": 30, "pairs_per_epoch": 8192},
    }
    for exp in dmod.EXPERIMENTS:
        short = exp.split("_")[1].lower()
        for kind in tf.MECHANISMS:
            recipes.append(
                Recipe(
                    f"exp_{short}_{kind}",
                    _estimator_recipe(exp, kind),
                    f"{kind} estimator trained per the {short} scheme, scored on its shifted-domain pairs",
                    defaults={"experiment": exp, "kind": kind, **est_budgets[exp]},
                )
            )
    recipes += [
        Recipe(
            "model_comparison",
            run_model_comparison,
            "pair-conditioned vs single-image families on one mechanism",
            defaults={"experiment": dmod.EXP_MNIST, "epochs": 30},
        ),
        Recipe(
            "learning_curves",
            run_learning_curves,
            "train-loss trajectories for the three model families",
            defaults={"experiment": dmod.EXP_MNIST, "epochs": 10},
        ),
        Recipe(
            "joint_vs_individual",
            run_joint_vs_individual,
            "joint four-parameter learning against per-mechanism estimators",
            defaults={"experiment": dmod.EXP_MNIST, "epochs": 30},
        ),
        Recipe(
            "identifier_f1",
            run_identifier_f1,
            "same-content identifier trained on noise, F1 in and out of domain",
            deps=("exp_noise_rotation",),
            defaults={"epochs": 20, "p_black": 0.7},
        ),
        Recipe(
            "classifier_baseline",
            run_classifier_baseline,
            "digit classifier on untransformed images, clean vs rotated accuracy",
            defaults={"epochs": 8, "step_size": 1e-3, "batch_size": 128},
        ),
        Recipe(
            "ced_rotated_mnist",
            run_ced_rotated_mnist,
            "hypothesis-verification variants under rotation covariate shift",
            deps=("exp_noise_rotation", "identifier_f1", "classifier_baseline"),
        ),
        Recipe(
            "candidate_sweep",
            run_candidate_sweep,
            "verification accuracy as the per-class candidate count grows",
            deps=("exp_noise_rotation", "identifier_f1", "classifier_baseline"),
            defaults={"n_candidates": 200},
        ),
        Recipe(
            "bw_ratio_sweep",
            run_bw_ratio_sweep,
            "noise pixel-ratio ablation scored on plain and pixel-swapped digits",
            defaults={"epochs": 12, "pairs_per_epoch": 8192},
        ),
        Recipe(
            "restoration",
            run_restoration,
            "gradient descent on the input image until the estimator reads a target shift",
            deps=("exp_noise_translation",),
        ),
    ]
    return {r.name: r for r in recipes}


REGISTRY = _registry()


def list_recipes() -> list:
    return [(r.name, r.anchor, list(r.deps)) for r in REGISTRY.values()]


def run_recipe(
    name: str,
    overrides: Optional[dict] = None,
    config_file: Optional[Path] = None,
) -> RunManifest:
    if name not in REGISTRY:
        known = ", ".join(sorted(REGISTRY))
        raise ConfigurationError(f"unknown recipe {name!r}; available: {known}")
    recipe = REGISTRY[name]
    cfg = build_config(
        recipe_defaults={"recipe": name, **recipe.defaults},
        file_path=config_file,
        overrides=overrides,
    )
    run_dir = Path(cfg.results_dir) / name
    run_dir.mkdir(parents=True, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    t0 = time.time()
    out = recipe.fn(cfg, run_dir)
    manifest = RunManifest(
        recipe=name,
        config=asdict(cfg),
        code_version=code_version(),
        started_at=started,
        elapsed_s=round(time.time() - t0, 2),
        artifacts=sorted(str(p) for p in out["artifacts"]),
        metrics=out["metrics"],
    )
    manifest.save(run_dir / "manifest.json")
    missing = [a for a in manifest.artifacts if not Path(a).exists()]
    if missing:
        raise RuntimeError(f"manifest lists absent artifacts: {missing}")
    return manifest
