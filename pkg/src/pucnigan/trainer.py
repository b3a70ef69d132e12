"""Alternating optimization of the PU classifier and the conditional GAN.

One outer round = ``L`` inner GAN steps (D step, G step, and after warm-up
an EMA update of the confusion matrix) followed by the classifier's
data-augmentation step(s) on generated samples.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from . import cgan, nets, pu_core
from .cgan import ConfigError, EMACorruption, GanVariant, LearnableCorruption
from .datasets import OracleClassifier, PUDataset
from .metrics import generator_label_accuracy, inception_score, pu_accuracy
from .noise_model import ConfusionMatrix, ema_update, estimate_delta, save_matrix
from .pu_core import PURiskConfig, TrainingAborted

logger = logging.getLogger(__name__)

STATE_VERSION = 1
METRIC_COLUMNS = ("outer_round", "variant", "pu_test_acc", "gen_label_acc", "trace_mean",
                  "is_mean", "is_std", "wallclock")
LOSS_COLUMNS = ("outer_round", "step", "d_objective", "d_penalty", "g_loss", "g_adversarial",
                "aux_surrogate", "aux_hard", "ema_update")


@dataclass
class TrainingSchedule:
    M: int = 64
    L: int = 200
    L0: int = 5
    outer_rounds: int = 10
    aug_steps_per_round: int = 1
    pretrain_epochs: int = 10
    pretrain_batch_size: int = 256
    early_stop_rounds: int | None = 5
    early_stop_delta: float = 0.001
    eval_n_per_class: int = 1000
    is_samples: int = 10_000
    is_splits: int = 10
    save_samples: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("M", "L", "L0", "aug_steps_per_round", "pretrain_epochs", "pretrain_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.outer_rounds < 0:
            raise ConfigError("outer_rounds must be >= 0")


@dataclass
class Hyper:
    beta: float = 5.0
    kappa: float = 0.75
    lam: float = 0.99
    lr_pu: float = 1e-3
    lr_gan: float = 1e-4
    pu_optimizer: str = "sgd"
    pu_momentum: float = 0.0
    gan_betas: tuple = (0.5, 0.9)
    phi: str = "wasserstein_gp"
    gp_weight: float = 10.0
    latent_dim: int = 128
    classifier_width: object = None
    gan_width: object = None
    freeze_confusion: bool = False
    augment: bool | None = None

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if not 0 < self.kappa < 1:
            raise ConfigError("kappa must be in (0, 1)")
        if not 0 <= self.lam <= 1:
            raise ConfigError("lambda must be in [0, 1]")
        self.gan_betas = tuple(self.gan_betas)


def resolve_augment(variant: GanVariant, hyper: Hyper) -> bool:
    if hyper.augment is None:
        return variant.generates_negative
    if hyper.augment and not variant.generates_negative:
        raise ConfigError(f"{variant.name} generates only K classes and cannot augment "
                          "a K+1-class classifier")
    return hyper.augment


@dataclass
class RunState:
    data: PUDataset
    variant: GanVariant
    schedule: TrainingSchedule
    hyper: Hyper
    f: torch.nn.Module
    G: torch.nn.Module
    D: torch.nn.Module
    corruption: object
    opt_f: torch.optim.Optimizer
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    gen: torch.Generator
    aug_gen: torch.Generator
    n_classes: int
    outer_round: int = 0
    step: int = 0
    running_rates: np.ndarray = None
    history: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    pretrain_log: list = field(default_factory=list)
    events: list = None
    stopped_early: bool = False
    last_checkpoint: str | None = None

    @property
    def confusion(self) -> ConfusionMatrix | None:
        if isinstance(self.corruption, EMACorruption):
            return self.corruption.confusion

    def _tensors(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            dtype = next(self.G.parameters()).dtype
            cache = {
                "x_all": torch.tensor(self.data.all_features(), dtype=dtype),
                "x_pos": torch.tensor(self.data.positives.x, dtype=dtype),
                "y_pos": torch.tensor(self.data.positives.y),
            }
            self._cache = cache
        return cache


def _gan_optimizers(G, D, corruption, hyper):
    g_params = list(G.parameters())
    if isinstance(corruption, LearnableCorruption):
        g_params += list(corruption.parameters())
    opt_g = torch.optim.Adam(g_params, lr=hyper.lr_gan, betas=hyper.gan_betas)
    opt_d = torch.optim.Adam(D.parameters(), lr=hyper.lr_gan, betas=hyper.gan_betas)
    return opt_g, opt_d


def init_run_state(data: PUDataset, variant, schedule: TrainingSchedule, hyper: Hyper,
                   f=None, pretrain_config: PURiskConfig | None = None) -> RunState:
    """Pretrain the PU classifier (unless ``f`` is given) and build the GAN."""
    if isinstance(variant, str):
        variant = GanVariant.preset(variant)
    resolve_augment(variant, hyper)
    seed = schedule.seed
    pretrain_log = []
    if f is None:
        config = pretrain_config or PURiskConfig(pi_p=data.pi_p, lr=hyper.lr_pu,
                                                 optimizer=hyper.pu_optimizer,
                                                 momentum=hyper.pu_momentum)
        f, pretrain_log = pu_core.pretrain_pu(data, config, schedule.pretrain_epochs,
                                              schedule.pretrain_batch_size, seed=seed,
                                              width=hyper.classifier_width)
    models = cgan.build_variant(variant, data.feature_shape, data.K, hyper.latent_dim,
                                seed=seed + 100, width=hyper.gan_width, ema_lambda=hyper.lam)
    opt_g, opt_d = _gan_optimizers(models.G, models.D, models.corruption, hyper)
    opt_f = pu_core.make_optimizer(f.parameters(), hyper.pu_optimizer, hyper.lr_pu,
                                   hyper.pu_momentum)
    return RunState(
        data=data, variant=variant, schedule=schedule, hyper=hyper, f=f, G=models.G,
        D=models.D, corruption=models.corruption, opt_f=opt_f, opt_g=opt_g, opt_d=opt_d,
        gen=torch.Generator().manual_seed(seed + 1), aug_gen=torch.Generator().manual_seed(seed + 2),
        n_classes=models.n_classes, running_rates=np.zeros(models.n_classes),
        pretrain_log=pretrain_log,
    )


def _real_batch(state: RunState):
    t = state._tensors()
    m = state.schedule.M
    if state.variant.label_source == "true_positive_labels":
        idx = torch.randint(0, len(t["x_pos"]), (m,), generator=state.gen)
        return t["x_pos"][idx], t["y_pos"][idx]
    idx = torch.randint(0, len(t["x_all"]), (m,), generator=state.gen)
    x = t["x_all"][idx]
    with torch.no_grad():
        y = state.f(x).argmax(dim=1)
    return x, y


def _event(state, kind, l):
    if state.events is not None:
        state.events.append((kind, l))


def run_inner_gan_loop(state: RunState) -> RunState:
    """``L`` inner steps: D ascent, G descent, then (from step ``L0``) the EMA
    update of the confusion matrix. Corruption at step ``l`` uses the matrix
    from before that step's update."""
    sch, hyp = state.schedule, state.hyper
    phi = cgan.measuring_function(hyp.phi, hyp.gp_weight)
    beta = hyp.beta if state.variant.aux_loss_enabled else 0.0
    use_ema = isinstance(state.corruption, EMACorruption) and not hyp.freeze_confusion
    dtype = next(state.G.parameters()).dtype
    state.f.requires_grad_(False)
    try:
        for l in range(1, sch.L + 1):
            x_real, y_real = _real_batch(state)
            d = cgan.d_step_loss(state.D, state.G, x_real, y_real, state.corruption, phi, state.gen)
            state.opt_d.zero_grad()
            d.loss.backward()
            state.opt_d.step()
            _event(state, "D", l)

            z = cgan.sample_latent(sch.M, state.G.latent_dim, state.gen, dtype)
            y = cgan.sample_labels(sch.M, state.n_classes, state.gen)
            g = cgan.g_step_loss(state.G, state.D, state.f, state.corruption, phi, beta, hyp.kappa,
                                 z, y, state.gen, state.running_rates)
            state.opt_g.zero_grad()
            g.loss.backward()
            state.opt_g.step()
            _event(state, "G", l)
            if g.aux is not None:
                present = g.aux.present
                rates = g.aux.rates.detach().double().numpy()
                state.running_rates[present] = (hyp.lam * state.running_rates[present]
                                                + (1 - hyp.lam) * rates[present])

            ema_done = False
            if use_ema and l >= sch.L0:
                # the G step's (z, y) re-evaluated under the updated generator
                with torch.no_grad():
                    pred = state.f(state.G(z, y)).argmax(dim=1).numpy()
                current = state.corruption.confusion
                delta = estimate_delta(pred, y.numpy(), current)
                state.corruption.confusion = ema_update(current, delta, hyp.lam)
                ema_done = True
                _event(state, "EMA", l)

            state.step += 1
            state.losses.append({
                "outer_round": state.outer_round + 1, "step": state.step,
                "d_objective": d.objective.item(), "d_penalty": d.penalty.item(),
                "g_loss": g.loss.item(), "g_adversarial": g.adversarial.item(),
                "aux_surrogate": g.aux.value.item() if g.aux is not None else 0.0,
                "aux_hard": g.aux.hard_value if g.aux is not None else 0.0,
                "ema_update": int(ema_done),
            })
    except FloatingPointError as exc:
        raise TrainingAborted(f"{exc} at step {state.step + 1}", checkpoint=state.last_checkpoint) from exc
    finally:
        state.f.requires_grad_(True)
    return state


def augment_pu(state: RunState) -> list[float]:
    """Descend the classifier's cross entropy on generated samples against
    their intended (uncorrupted) labels. Returns the pre-step losses."""
    G, f = state.G, state.f
    dtype = next(G.parameters()).dtype
    ces = []
    for _ in range(state.schedule.aug_steps_per_round):
        z = cgan.sample_latent(state.schedule.M, G.latent_dim, state.aug_gen, dtype)
        y = cgan.sample_labels(state.schedule.M, state.n_classes, state.aug_gen)
        with torch.no_grad():
            x = G(z, y)
        loss = F.cross_entropy(f(x), y)
        state.opt_f.zero_grad()
        loss.backward()
        state.opt_f.step()
        ces.append(loss.item())
    _event(state, "AUG", state.outer_round)
    return ces


def evaluate(state: RunState, oracle: OracleClassifier | None = None,
             eval_classifier: OracleClassifier | None = None) -> dict:
    """Metrics row for the current snapshot; seeded independently of training."""
    sch = state.schedule
    eval_seed = sch.seed * 1000 + state.outer_round
    ctx = dict(round=state.outer_round, variant=state.variant.name, dataset=state.data.name,
               positive_rate=state.data.positive_rate)
    row = {"outer_round": state.outer_round, "variant": state.variant.name,
           "pu_test_acc": pu_accuracy(state.f, state.data.test, **ctx).value,
           "gen_label_acc": float("nan"), "trace_mean": float("nan"),
           "is_mean": float("nan"), "is_std": float("nan")}
    sampler = cgan.make_sampler(state.G)
    if oracle is not None:
        rec, pg = generator_label_accuracy(sampler, oracle, state.n_classes, sch.eval_n_per_class,
                                           seed=eval_seed, **ctx)
        row["gen_label_acc"] = rec.value
        row["trace_mean"] = pg.trace_mean
    if eval_classifier is not None:
        rec = inception_score(sampler, eval_classifier, state.n_classes, sch.is_samples,
                              sch.is_splits, seed=eval_seed + 1, **ctx)
        row["is_mean"], row["is_std"] = rec.value, rec.dispersion
    return row


def _should_stop(history, sch: TrainingSchedule) -> bool:
    n = sch.early_stop_rounds
    if not n or len(history) <= n:
        return False
    recent = [h["pu_test_acc"] for h in history[-(n + 1):]]
    return max(recent) - min(recent) < sch.early_stop_delta


def joint_optimize(data: PUDataset, variant, schedule: TrainingSchedule, hyper: Hyper | None = None,
                   oracle=None, eval_classifier=None, run_dir=None, state: RunState | None = None,
                   f=None, record_events=False) -> RunState:
    """Pretrain (or take ``f``), then alternate GAN rounds and augmentation.

    Pass ``state`` (e.g. from :func:`load_checkpoint`) to resume; rounds
    already completed are skipped.
    """
    hyper = hyper or Hyper()
    if state is None:
        state = init_run_state(data, variant, schedule, hyper, f=f)
    if record_events and state.events is None:
        state.events = []
    augment = resolve_augment(state.variant, state.hyper)
    run_dir = Path(run_dir) if run_dir is not None else None
    t0 = time.perf_counter()
    if not state.history:
        row = evaluate(state, oracle, eval_classifier)
        row["wallclock"] = time.perf_counter() - t0
        state.history.append(row)
        _persist_round(state, run_dir)
    while state.outer_round < state.schedule.outer_rounds and not state.stopped_early:
        run_inner_gan_loop(state)
        if augment:
            augment_pu(state)
        state.outer_round += 1
        row = evaluate(state, oracle, eval_classifier)
        row["wallclock"] = time.perf_counter() - t0
        state.history.append(row)
        logger.info("%s round %d pu_acc %.4f gen_acc %.4f", state.variant.name, state.outer_round,
                    row["pu_test_acc"], row["gen_label_acc"])
        state.stopped_early = _should_stop(state.history, state.schedule)
        _persist_round(state, run_dir)
    return state


def _persist_round(state: RunState, run_dir: Path | None):
    if run_dir is None:
        return
    run_dir.mkdir(parents=True, exist_ok=True)
    write_csv(run_dir / "metrics.csv", state.history, METRIC_COLUMNS)
    write_csv(run_dir / "losses.csv", state.losses, LOSS_COLUMNS)
    ckpt = run_dir / "checkpoints" / f"round_{state.outer_round}"
    save_checkpoint(state, ckpt)
    if state.schedule.save_samples:
        from .plotting import save_sample_grid
        save_sample_grid(state.G, state.n_classes, state.data.K,
                         run_dir / "samples" / f"round_{state.outer_round}.png",
                         seed=state.schedule.seed)


def write_csv(path, rows, columns):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# checkpoints


def _config_blob(state: RunState) -> dict:
    return {"variant": asdict(state.variant), "schedule": asdict(state.schedule),
            "hyper": asdict(state.hyper)}


def save_checkpoint(state: RunState, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    corruption = None
    if isinstance(state.corruption, EMACorruption):
        c = state.corruption.confusion
        corruption = {"kind": "ema", "entries": c.entries, "lambda": c.ema_lambda,
                      "update_count": c.update_count}
        save_matrix(directory / "confusion.txt", c)
    elif isinstance(state.corruption, LearnableCorruption):
        corruption = {"kind": "learnable", "state": state.corruption.state_dict()}
    blob = {
        "format_version": STATE_VERSION,
        **_config_blob(state),
        "networks": {name: {"descriptor": net.descriptor, "state": net.state_dict()}
                     for name, net in (("f", state.f), ("G", state.G), ("D", state.D))},
        "dtype": str(next(state.G.parameters()).dtype),
        "corruption": corruption,
        "optimizers": {"f": state.opt_f.state_dict(), "G": state.opt_g.state_dict(),
                       "D": state.opt_d.state_dict()},
        "rng": {"gen": state.gen.get_state(), "aug_gen": state.aug_gen.get_state()},
        "outer_round": state.outer_round,
        "step": state.step,
        "running_rates": state.running_rates.copy(),
        "history": state.history,
        "losses": state.losses,
        "pretrain_log": state.pretrain_log,
        "stopped_early": state.stopped_early,
    }
    torch.save(blob, directory / "state.pt")
    state.last_checkpoint = str(directory)
    return directory


def load_checkpoint(directory, data: PUDataset) -> RunState:
    directory = Path(directory)
    blob = torch.load(directory / "state.pt", weights_only=False)
    if blob.get("format_version") != STATE_VERSION:
        raise ValueError(f"{directory}: unsupported checkpoint version {blob.get('format_version')}")
    dtype = getattr(torch, blob["dtype"].split(".")[-1])
    variant = GanVariant(**blob["variant"])
    schedule = TrainingSchedule(**blob["schedule"])
    hyper = Hyper(**blob["hyper"])
    nets_ = {}
    for name, spec in blob["networks"].items():
        net = nets.build(spec["descriptor"], dtype=dtype)
        net.load_state_dict(spec["state"])
        nets_[name] = net
    n_classes = variant.n_generated(data.K)
    c = blob["corruption"]
    if c is None:
        corruption = cgan.IdentityCorruption(n_classes)
    elif c["kind"] == "ema":
        corruption = EMACorruption(ConfusionMatrix(c["entries"], c["lambda"], c["update_count"]))
    else:
        corruption = LearnableCorruption(n_classes, dtype=dtype)
        corruption.load_state_dict(c["state"])
    opt_g, opt_d = _gan_optimizers(nets_["G"], nets_["D"], corruption, hyper)
    opt_f = pu_core.make_optimizer(nets_["f"].parameters(), hyper.pu_optimizer, hyper.lr_pu,
                                   hyper.pu_momentum)
    for opt, key in ((opt_f, "f"), (opt_g, "G"), (opt_d, "D")):
        opt.load_state_dict(blob["optimizers"][key])
    gen, aug_gen = torch.Generator(), torch.Generator()
    gen.set_state(blob["rng"]["gen"])
    aug_gen.set_state(blob["rng"]["aug_gen"])
    return RunState(
        data=data, variant=variant, schedule=schedule, hyper=hyper, f=nets_["f"], G=nets_["G"],
        D=nets_["D"], corruption=corruption, opt_f=opt_f, opt_g=opt_g, opt_d=opt_d, gen=gen,
        aug_gen=aug_gen, n_classes=n_classes, outer_round=blob["outer_round"], step=blob["step"],
        running_rates=np.array(blob["running_rates"]), history=list(blob["history"]),
        losses=list(blob["losses"]), pretrain_log=list(blob["pretrain_log"]),
        stopped_early=blob["stopped_early"], last_checkpoint=str(directory),
    )


def save_config(path, config: dict):
    Path(path).write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
