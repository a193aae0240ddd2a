"""
Training loop for Switch-DiT and the plain DiT baseline.

One step: refresh the stacked routing map and (every `match_every` steps) the
gate-to-prior matching, draw a batch with RNG seeded by (seed, step), take an
AdamW step on L_noise + lambda_dp L_dp (+ lambda_load L_load) and update the
EMA shadow. Seeding per step makes a resumed run replay the same batches.
"""

import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from .config import TrainConfig
from .datasets import Dataset, gen_dataset, random_hflip
from .errors import ConfigError, TrainingDivergedError
from .export import provenance_lines
from .gating import GateOutput, stacked_routing
from .losses import diffusion_prior_loss, load_balance_loss, noise_loss, routing_hamming, total_loss
from .matching import Assignment, assignment_cost, hungarian
from .network import EMA, SwitchDiT
from .optim import AdamW
from .prior import PriorMask, build_prior_mask, random_allocation_mask
from .sampling import eval_mmd, sample
from .schedule import cosine_alphabar, q_sample
from .tensor import Tensor, backward, no_grad, scale

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "step",
    "loss_noise",
    "loss_dp",
    "loss_load",
    "loss_total",
    "match_cost",
    "expert_evals",
    "gate_stable",
    "ema_gate_hamming",
    "prior_hamming",
    "sample_mmd",
]


def training_prior(cfg: TrainConfig) -> Optional[PriorMask]:
    """The prior map a run regresses onto, or None when routing has no sparsity."""
    m = cfg.model
    if not m.integration.uses_smoe or m.top_k >= m.num_experts:
        return None
    T = cfg.schedule.timesteps
    if cfg.random_allocation:
        return random_allocation_mask(m.depth, m.num_experts, m.top_k, T, cfg.seed, cfg.prior_alpha)
    return build_prior_mask(m.depth, m.num_experts, m.top_k, T, cfg.prior_alpha)


class MetricsLog:
    """Append-only metrics CSV with a fixed header and '#' provenance lines."""

    def __init__(self, path: Path, config):
        self.path = Path(path)
        self.config = config

    def append(self, rows: List[Dict]) -> None:
        if not rows:
            return
        frame = pd.DataFrame(rows, columns=METRIC_COLUMNS)
        fresh = not self.path.exists()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", newline="") as f:
            if fresh:
                for line in provenance_lines(self.config):
                    f.write(f"# {line}\n")
            frame.to_csv(f, header=fresh, index=False, float_format="%.17g", lineterminator="\n")

    def read(self) -> pd.DataFrame:
        return pd.read_csv(self.path, comment="#")


class Trainer:
    """Owns the model, its EMA shadow, the optimizer, the data and the routing state."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        mcfg = cfg.model
        self.schedule = cosine_alphabar(cfg.schedule.timesteps, cfg.schedule.cosine_s)
        self.model = SwitchDiT(mcfg, cfg.schedule.timesteps, seed=cfg.seed)
        self.ema = EMA(self.model, cfg.ema_decay)
        self.optimizer = AdamW(
            list(self.model.named_parameters()),
            lr=cfg.lr,
            betas=cfg.adam_betas,
            eps=cfg.adam_eps,
            weight_decay=cfg.weight_decay,
        )
        self.dataset: Dataset = gen_dataset(
            cfg.dataset, cfg.dataset_size, cfg.data_seed, mcfg.image_size, mcfg.channels
        )
        if mcfg.conditional:
            if self.dataset.labels is None:
                raise ConfigError(f"dataset '{cfg.dataset}' has no labels for a class-conditional model")
            if self.dataset.num_classes > mcfg.num_classes:
                raise ConfigError(
                    f"dataset '{cfg.dataset}' has {self.dataset.num_classes} classes, model {mcfg.num_classes}"
                )
        self.prior: Optional[PriorMask] = training_prior(cfg)
        width = mcfg.depth * mcfg.num_experts
        self.assignment = Assignment.identity(width)
        self.last_gate_map: Optional[np.ndarray] = None
        self.step = 0

    @property
    def uses_smoe(self) -> bool:
        return self.model.gating is not None

    # ------------------------------------------------------------------ routing

    def refresh_matching(self, gate_map: np.ndarray) -> Assignment:
        """Align gate columns to prior columns; random allocation keeps the identity."""
        C = assignment_cost(gate_map, self.prior.rows)
        if self.cfg.random_allocation:
            self.assignment = Assignment.identity(C.shape[0], float(np.trace(C)))
        else:
            self.assignment = hungarian(C)
        return self.assignment

    def prior_loss(self, gates: GateOutput, t: np.ndarray) -> Tensor:
        """Mean of L_dp over the distinct timesteps in the batch (first sample of each)."""
        m = self.cfg.model
        _, first = np.unique(t, return_index=True)
        p_tot = gates.p_tot[first]
        rows = self.prior.rows[t[first] - 1]
        selected = gates.mask[first] if self.cfg.project_prior else None
        per_t = diffusion_prior_loss(
            p_tot, self.assignment, rows, m.depth, m.top_k, normalize=self.cfg.normalize_prior, selected=selected
        )
        return per_t.mean()

    def ema_routing_distance(self) -> Optional[int]:
        if not self.uses_smoe:
            return None
        _, online = stacked_routing(self.model)
        _, shadow = stacked_routing(self.model, self.ema.shadow)
        return routing_hamming(online, shadow)

    def prior_distance(self, gate_map: Optional[np.ndarray] = None) -> Optional[int]:
        """Stacked Hamming distance between the aligned gate map and the prior."""
        if self.prior is None:
            return None
        if gate_map is None:
            _, gate_map = stacked_routing(self.model)
        return routing_hamming(gate_map, self.prior.rows, self.assignment)

    # -------------------------------------------------------------------- steps

    def _batch(self, rng: np.random.Generator):
        cfg = self.cfg
        idx = rng.integers(0, len(self.dataset), size=cfg.batch_size)
        x0 = self.dataset.images[idx]
        if cfg.hflip:
            x0 = random_hflip(x0, rng)
        t = rng.integers(1, cfg.schedule.timesteps + 1, size=cfg.batch_size)
        eps = rng.standard_normal(x0.shape)
        labels = None
        if self.model.conditional:
            labels = self.model.y_embedder.drop(
                self.dataset.labels[idx], cfg.model.class_dropout_prob, rng
            )
        return x0, t, eps, labels

    def train_step(self) -> Dict:
        """One optimizer step; returns the metrics row."""
        cfg = self.cfg
        step = self.step + 1
        rng = np.random.default_rng([cfg.seed, step])
        row: Dict = {column: None for column in METRIC_COLUMNS}
        row["step"] = step

        if self.uses_smoe:
            _, gate_map = stacked_routing(self.model)
            row["gate_stable"] = int(
                self.last_gate_map is not None and np.array_equal(gate_map, self.last_gate_map)
            )
            self.last_gate_map = gate_map
            if self.prior is not None:
                if (step - 1) % cfg.match_every == 0:
                    self.refresh_matching(gate_map)
                row["match_cost"] = self.assignment.cost

        x0, t, eps, labels = self._batch(rng)
        x_t = q_sample(x0, t, eps, self.schedule)
        noise_rng = rng if cfg.model.noisy_gating else None
        self.model.reset_counters()
        eps_hat, gates = self.model(x_t, t, labels, rng=noise_rng)

        l_noise = noise_loss(eps_hat, eps)
        loss = l_noise
        row["loss_noise"] = l_noise.item()
        if self.prior is not None:
            if cfg.lambda_dp > 0:
                l_dp = self.prior_loss(gates, t)
                loss = total_loss(loss, l_dp, cfg.lambda_dp)
            else:
                with no_grad():
                    l_dp = self.prior_loss(gates, t)
            row["loss_dp"] = l_dp.item()
        if cfg.load_balance:
            l_load = load_balance_loss(gates.p, enabled=True)
            loss = loss + scale(l_load, cfg.lambda_load)
            row["loss_load"] = l_load.item()
        row["loss_total"] = loss.item()
        if self.uses_smoe:
            row["expert_evals"] = int(self.model.expert_evaluations().sum())

        if not loss.is_finite():
            logger.error(f"Loss became {loss.item()} at step {step}; timesteps {t.tolist()}")
            raise TrainingDivergedError(step, (cfg.seed, step), detail=f"loss={loss.item()}")

        self.optimizer.zero_grad()
        backward(loss, inputs=self.optimizer.params)
        self.optimizer.step()
        self.ema.update(self.model)
        self.step = step

        if self.uses_smoe and step % cfg.ema_every_eval == 0:
            row["ema_gate_hamming"] = self.ema_routing_distance()
            row["prior_hamming"] = self.prior_distance()
        logger.debug(
            f"step {step}: noise={row['loss_noise']:.6f} dp={row['loss_dp']} total={row['loss_total']:.6f}"
        )
        return row

    def evaluate_samples(self, n: int = 64, seed: int = 0) -> float:
        """MMD^2 between EMA samples and a fresh draw of the training distribution."""
        cfg = self.cfg
        samples = sample(
            self.model, self.schedule, n, cfg.schedule.timesteps, guidance=1.0, seed=seed, state=self.ema.shadow
        )
        heldout = gen_dataset(
            cfg.dataset, n, cfg.data_seed + 1, cfg.model.image_size, cfg.model.channels
        ).images
        return eval_mmd(samples, heldout)

    def fit(
        self,
        steps: Optional[int] = None,
        metrics_path: Optional[Path] = None,
        mmd_every: int = 0,
        callback: Optional[Callable[[Dict], None]] = None,
    ) -> pd.DataFrame:
        """Train until `steps` total steps (default cfg.steps), appending metrics as it goes."""
        target = self.cfg.steps if steps is None else steps
        log = MetricsLog(metrics_path, self.cfg) if metrics_path is not None else None
        rows: List[Dict] = []
        pending: List[Dict] = []
        logger.info(f"Training from step {self.step} to {target}")
        while self.step < target:
            row = self.train_step()
            if mmd_every and self.step % mmd_every == 0:
                row["sample_mmd"] = self.evaluate_samples(seed=self.step)
            rows.append(row)
            pending.append(row)
            if callback is not None:
                callback(row)
            if self.step % self.cfg.log_every == 0 or self.step == target:
                logger.info(
                    f"step {self.step}/{target} loss={row['loss_total']:.5f} "
                    f"dp={row['loss_dp']} match_cost={row['match_cost']}"
                )
                if log is not None:
                    log.append(pending)
                pending = []
        if log is not None:
            log.append(pending)
        return pd.DataFrame(rows, columns=METRIC_COLUMNS)

    # ---------------------------------------------------------------- restore

    @classmethod
    def from_checkpoint(cls, ckpt) -> "Trainer":
        trainer = cls(ckpt.config)
        trainer.model.load_state_dict(ckpt.model_state)
        trainer.ema.load_state_dict(ckpt.ema_state)
        trainer.optimizer.load_state_dict(ckpt.optim_state)
        trainer.step = ckpt.step
        if ckpt.assignment is not None:
            trainer.assignment = ckpt.assignment
        trainer.last_gate_map = ckpt.last_gate_map
        return trainer
