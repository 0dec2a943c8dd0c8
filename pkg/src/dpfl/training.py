"""The seeded training loop shared by centralized runs and federated clients.

One code path serves both private and non-private training: every update
aggregates per-example gradients through `noisy_aggregate`, with the DP
branch adding clipping, noise and ledger bookkeeping. Randomness comes from
per-epoch streams keyed by (stream_seed, purpose, epoch index), so a run is
a pure function of its inputs and a federated client resuming at epoch k
consumes exactly the streams a centralized run would.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from . import seeding
from .dp import DpConfig, PrivacyLedger, calibrate_sigma, noisy_aggregate, private_training_step
from .errors import DataError
from .nn import ModelParams, accuracy, bce_loss, forward, per_sample_grads, predict
from .optim import OptimizerState, apply_step, make_optimizer

DEFAULT_BATCH_SIZE = 32
DEFAULT_LR = 0.001
DEFAULT_DROPOUT = 0.2
DEFAULT_HIDDEN = (128, 64, 32, 16)


@dataclass
class TrainSettings:
    batch_size: int = DEFAULT_BATCH_SIZE
    lr: float = DEFAULT_LR
    optimizer: str = "adam"
    dropout: float = DEFAULT_DROPOUT
    dp: DpConfig | None = None  # resolved config (noise multiplier set) or None


def steps_per_epoch(n_train: int, batch_size: int) -> int:
    if n_train < 1:
        raise DataError("training set is empty")
    return math.ceil(n_train / batch_size)


def resolve_dp_config(
    cfg: DpConfig, n_train: int, batch_size: int, total_epochs: int
) -> DpConfig:
    """Fills sample rate and noise multiplier for a concrete training plan.

    In target mode the noise multiplier is calibrated so that the full run
    of total_epochs stays within the epsilon budget.
    """
    cfg.validate()
    q = min(batch_size / n_train, 1.0)
    total_steps = total_epochs * steps_per_epoch(n_train, batch_size)
    if cfg.noise_multiplier is None:
        sigma = calibrate_sigma(cfg.target_epsilon, cfg.delta, q, total_steps)
    else:
        sigma = cfg.noise_multiplier
    if cfg.delta >= 1.0 / n_train:
        import warnings

        warnings.warn(
            f"delta={cfg.delta:g} is not smaller than 1/{n_train}; "
            "the privacy guarantee is weak",
            stacklevel=2,
        )
    return replace(cfg, sample_rate=q, noise_multiplier=sigma)


def evaluate(params: ModelParams, X: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """(mean BCE loss, accuracy) in eval mode."""
    trace = forward(params, X)
    return bce_loss(trace.probs, y), accuracy(predict(params, X), y)


class Trainer:
    """Mutable training state; `run_epoch(e)` advances one epoch.

    The caller owns epoch numbering: a federated client passes global epoch
    indices (round - 1) * local_epochs + e so that its random streams line
    up with an equivalent centralized run.
    """

    def __init__(
        self,
        params: ModelParams,
        X: np.ndarray,
        y: np.ndarray,
        settings: TrainSettings,
        stream_seed: int,
        ledger: PrivacyLedger | None = None,
        opt_state: OptimizerState | None = None,
    ):
        if X.shape[0] != y.shape[0]:
            raise DataError("feature/label row mismatch")
        self.params = params
        self.X = X
        self.y = np.asarray(y, dtype=np.float64)
        self.settings = settings
        self.stream_seed = stream_seed
        self.n = X.shape[0]
        self.steps = steps_per_epoch(self.n, settings.batch_size)
        self.opt_state = opt_state or make_optimizer(
            settings.optimizer, settings.lr, params
        )
        if settings.dp is not None:
            if settings.dp.noise_multiplier is None:
                raise DataError("DP settings must be resolved before training")
            self.ledger = ledger if ledger is not None else PrivacyLedger()
        else:
            self.ledger = ledger
        self._shapes = [
            ((w.shape[0], w.shape[1]), (b.shape[0],)) for w, b in params.layers
        ]

    def _batches(self, rng: np.random.Generator) -> list[np.ndarray]:
        dp = self.settings.dp
        if dp is not None and dp.sampling == "poisson":
            return [
                np.flatnonzero(rng.random(self.n) < dp.sample_rate)
                for _ in range(self.steps)
            ]
        perm = rng.permutation(self.n)
        b = self.settings.batch_size
        return [perm[i : i + b] for i in range(0, self.n, b)]

    def run_epoch(self, epoch_index: int) -> None:
        s = self.settings
        rng_batch = seeding.stream(self.stream_seed, seeding.BATCH, epoch_index)
        rng_drop = seeding.stream(self.stream_seed, seeding.DROPOUT, epoch_index)
        rng_noise = seeding.stream(self.stream_seed, seeding.NOISE, epoch_index)
        for batch in self._batches(rng_batch):
            if batch.size:
                grads, _ = per_sample_grads(
                    self.params,
                    self.X[batch],
                    self.y[batch],
                    dropout_p=s.dropout,
                    train=True,
                    rng=rng_drop,
                )
            else:
                grads = []
            if s.dp is not None:
                # Poisson: divide by the expected batch q*N; fixed: by the
                # realized size, which makes sigma=0 reproduce non-private
                # training bit for bit.
                if s.dp.sampling == "poisson":
                    expected = s.dp.sample_rate * self.n
                else:
                    expected = float(batch.size)
                self.params, self.opt_state = private_training_step(
                    self.params,
                    grads,
                    s.dp,
                    self.opt_state,
                    self.ledger,
                    rng_noise,
                    expected,
                    shapes=self._shapes,
                )
            else:
                grad = noisy_aggregate(
                    grads, 1.0, 0.0, float(batch.size), None, shapes=self._shapes
                )
                self.params, self.opt_state = apply_step(
                    self.params, grad, self.opt_state
                )

    def spent_epsilon(self) -> float | None:
        if self.settings.dp is None or self.ledger is None:
            return None
        return self.ledger.epsilon(self.settings.dp.delta)[0]
