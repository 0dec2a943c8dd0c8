"""Synchronous full-participation FedAvg over the binary wire protocol.

The server and client logic live in transport-free cores (`ServerCore`,
`ClientSession`); the socket runners and the in-process simulator drive the
same cores and route every message through the wire codec, so the two
deployment modes produce bit-identical weights for identical seeds.

Raw dataset rows never enter a message: clients send model weights and
scalar metrics only.
"""

import socket
from dataclasses import dataclass, field

import numpy as np

from . import wire
from .data import RecordTable, apply_standardize, binarize_target, encode_features, fit_standardize, impute_missing
from .dp import DpConfig, PrivacyLedger
from .errors import DataError, ProtocolError
from .nn import ModelParams, init_model
from .training import TrainSettings, Trainer, evaluate, resolve_dp_config

# A client update is exactly a decoded FIT_RESULT frame.
ClientUpdate = wire.FitResult

PHASE_WAITING = "waiting_for_clients"
PHASE_CONFIGURING = "configuring"
PHASE_COLLECTING = "collecting"
PHASE_AGGREGATED = "aggregated"
PHASE_DONE = "done"

SOCKET_TIMEOUT = 120.0


@dataclass
class Hyperparams:
    """Session-wide settings broadcast to clients in every ROUND_CONFIG."""

    layer_sizes: list[int]
    rounds: int
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 0.001
    optimizer: str = "adam"
    sampling: str = "poisson"
    dropout: float = 0.2
    dp_mode: str = "off"  # "off" | "target" | "sigma"
    target_epsilon: float = 0.0
    delta: float = 1e-5
    clip_norm: float = 1.0
    noise_multiplier: float = 0.0

    def round_config(self, round_number: int, weights: list[np.ndarray]) -> wire.RoundConfig:
        return wire.RoundConfig(
            round_number=round_number,
            total_rounds=self.rounds,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            optimizer=self.optimizer,
            sampling=self.sampling,
            dp_mode=self.dp_mode,
            lr=self.lr,
            dropout=self.dropout,
            target_epsilon=self.target_epsilon,
            delta=self.delta,
            clip_norm=self.clip_norm,
            noise_multiplier=self.noise_multiplier,
            weights=weights,
        )


def fedavg_aggregate(updates: list[ClientUpdate]) -> list[np.ndarray]:
    """Example-count-weighted mean of client weights.

    Computed as anchor + sum_i c_i * (w_i - anchor) over updates sorted by
    client id, which makes the result independent of input order and exactly
    idempotent on identical inputs. The weight vector c sums to 1 up to
    rounding.
    """
    if not updates:
        raise DataError("cannot aggregate zero updates")
    rounds = {u.round_number for u in updates}
    if len(rounds) != 1:
        raise ProtocolError(f"updates span rounds {sorted(rounds)}")
    ordered = sorted(updates, key=lambda u: u.client_id)
    shapes = [w.shape for w in ordered[0].weights]
    for u in ordered:
        if [w.shape for w in u.weights] != shapes:
            raise DataError(f"update from {u.client_id} has mismatched weight shapes")
    total = sum(u.num_examples for u in ordered)
    if total <= 0:
        raise DataError("total example count across updates is zero")
    anchor = [w.copy() for w in ordered[0].weights]
    out = [w.copy() for w in anchor]
    for u in ordered:
        c = u.num_examples / total
        for acc, w, a in zip(out, u.weights, anchor):
            acc += c * (w - a)
    return out


class ServerCore:
    """Round state machine; transports feed it registrations and updates."""

    def __init__(self, n_clients: int, rounds: int, init_params: ModelParams,
                 hyper: Hyperparams):
        if n_clients < 1 or rounds < 1:
            raise DataError("need at least one client and one round")
        self.n_clients = n_clients
        self.rounds = rounds
        self.hyper = hyper
        self.global_params = init_params
        self.phase = PHASE_WAITING
        self.round = 0
        self.clients: list[str] = []
        self._pending: dict[str, ClientUpdate] = {}
        self.metrics_log: list[dict] = []

    def register(self, client_id: str) -> bool:
        """Accepts a HELLO; duplicates and late registrations are refused."""
        if self.phase != PHASE_WAITING or client_id in self.clients:
            return False
        self.clients.append(client_id)
        if len(self.clients) == self.n_clients:
            self.phase = PHASE_CONFIGURING
        return True

    def start_round(self) -> wire.RoundConfig:
        if self.phase not in (PHASE_CONFIGURING, PHASE_AGGREGATED):
            raise ProtocolError(f"cannot start a round in phase {self.phase!r}")
        self.round += 1
        self._pending = {}
        self.phase = PHASE_COLLECTING
        return self.hyper.round_config(self.round, self.global_params.flat_arrays())

    def receive_update(self, update: ClientUpdate) -> None:
        if self.phase != PHASE_COLLECTING:
            raise ProtocolError(f"unexpected update in phase {self.phase!r}")
        if update.round_number != self.round:
            raise ProtocolError(
                f"update for round {update.round_number}, server is on {self.round}"
            )
        if update.client_id not in self.clients:
            raise ProtocolError(f"update from unregistered client {update.client_id!r}")
        if update.client_id in self._pending:
            raise ProtocolError(f"duplicate update from {update.client_id!r}")
        self._pending[update.client_id] = update

    def finish_round(self) -> ModelParams:
        """Aggregates once every registered client has reported."""
        if self.phase != PHASE_COLLECTING:
            raise ProtocolError(f"cannot aggregate in phase {self.phase!r}")
        if len(self._pending) != self.n_clients:
            raise ProtocolError(
                f"round {self.round} has {len(self._pending)} of "
                f"{self.n_clients} updates"
            )
        updates = list(self._pending.values())
        aggregated = fedavg_aggregate(updates)
        self.global_params = ModelParams.from_flat_arrays(aggregated)
        for u in sorted(updates, key=lambda x: x.client_id):
            self.metrics_log.append(
                {
                    "round": self.round,
                    "phase": "fit",
                    "client_id": u.client_id,
                    "num_examples": u.num_examples,
                    **u.metrics,
                }
            )
        self.metrics_log.append(
            {"round": self.round, "phase": "aggregate", "num_clients": self.n_clients}
        )
        self.phase = PHASE_DONE if self.round == self.rounds else PHASE_AGGREGATED
        return self.global_params


class ClientSession:
    """Local training state driven by ROUND_CONFIG messages.

    The shard is preprocessed on first contact (binarize, self-imputation,
    encoding, shard-fitted scaler); rows never leave the client. Optimizer
    state and the privacy ledger persist across rounds, and epochs are
    numbered globally, so a single-client session replays a centralized run
    exactly.
    """

    def __init__(self, client_id: str, shard: RecordTable, train_seed: int):
        if shard.n_rows == 0:
            raise DataError("client shard is empty")
        self.client_id = client_id
        self.shard = shard
        self.train_seed = train_seed
        self.trainer: Trainer | None = None
        self._expected_round = 1
        self.report: dict = {"client_id": client_id, "updates_sent": 0}

    def _setup(self, cfg: wire.RoundConfig) -> None:
        table = binarize_target(self.shard)
        table = impute_missing(table, table)
        matrix, labels = encode_features(table)
        scaler = fit_standardize(matrix)
        X = apply_standardize(matrix, scaler).values
        dp = None
        if cfg.dp_mode != "off":
            raw = DpConfig(
                target_epsilon=cfg.target_epsilon if cfg.dp_mode == "target" else None,
                noise_multiplier=cfg.noise_multiplier if cfg.dp_mode == "sigma" else None,
                delta=cfg.delta,
                clip_norm=cfg.clip_norm,
                sampling=cfg.sampling,
            )
            dp = resolve_dp_config(
                raw, X.shape[0], cfg.batch_size, cfg.total_rounds * cfg.local_epochs
            )
        settings = TrainSettings(
            batch_size=cfg.batch_size,
            lr=cfg.lr,
            optimizer=cfg.optimizer,
            dropout=cfg.dropout,
            dp=dp,
        )
        params = ModelParams.from_flat_arrays(cfg.weights)
        self.trainer = Trainer(
            params, X, labels, settings, self.train_seed,
            ledger=PrivacyLedger() if dp is not None else None,
        )

    def handle_round_config(self, cfg: wire.RoundConfig) -> wire.FitResult:
        if cfg.round_number != self._expected_round:
            raise ProtocolError(
                f"expected round {self._expected_round}, got {cfg.round_number}"
            )
        if self.trainer is None:
            self._setup(cfg)
        trainer = self.trainer
        trainer.params = ModelParams.from_flat_arrays(cfg.weights)
        base = (cfg.round_number - 1) * cfg.local_epochs
        for e in range(cfg.local_epochs):
            trainer.run_epoch(base + e)
        loss, acc = evaluate(trainer.params, trainer.X, trainer.y)
        metrics = {"loss": loss, "accuracy": acc}
        spent = trainer.spent_epsilon()
        if spent is not None:
            metrics["spent_epsilon"] = spent
        self._expected_round += 1
        self.report["updates_sent"] += 1
        self.report["rounds_completed"] = cfg.round_number
        self.report.update(metrics)
        return wire.FitResult(
            client_id=self.client_id,
            round_number=cfg.round_number,
            num_examples=trainer.n,
            weights=trainer.params.flat_arrays(),
            metrics=metrics,
        )

    def handle_eval_request(self, req: wire.EvalRequest) -> wire.EvalResult:
        if self.trainer is None:
            raise ProtocolError("EVAL_REQUEST before any ROUND_CONFIG")
        params = ModelParams.from_flat_arrays(req.weights)
        loss, acc = evaluate(params, self.trainer.X, self.trainer.y)
        return wire.EvalResult(
            client_id=self.client_id,
            round_number=req.round_number,
            num_examples=self.trainer.n,
            metrics={"loss": loss, "accuracy": acc},
        )


def _codec_roundtrip(msg: wire.Message) -> wire.Message:
    return wire.decode_message(wire.encode_message(msg))


@dataclass
class SessionResult:
    params: ModelParams
    metrics_log: list[dict] = field(default_factory=list)


def _log_central_eval(core: ServerCore, eval_fn) -> None:
    if eval_fn is None:
        return
    loss, acc = eval_fn(core.global_params)
    core.metrics_log.append(
        {
            "round": core.round,
            "phase": "eval",
            "test_loss": loss,
            "test_acc": acc,
        }
    )


def simulate(
    partitions: list[RecordTable],
    client_seeds: list[int],
    rounds: int,
    hyper: Hyperparams,
    init_seed: int,
    eval_fn=None,
) -> SessionResult:
    """Runs the whole federation in process, messages through the codec.

    eval_fn, if given, maps global ModelParams to (loss, accuracy) on data
    held by the harness; it is called after every aggregation.
    """
    if len(partitions) != len(client_seeds):
        raise DataError("one seed per partition required")
    init_params = init_model(hyper.layer_sizes, init_seed)
    core = ServerCore(len(partitions), rounds, init_params, hyper)
    sessions = []
    for i, (shard, seed) in enumerate(zip(partitions, client_seeds)):
        session = ClientSession(f"client-{i}", shard, seed)
        hello = _codec_roundtrip(wire.Hello(session.client_id))
        if not core.register(hello.client_id):
            raise ProtocolError(f"registration refused for {session.client_id!r}")
        sessions.append(session)
    for _ in range(rounds):
        cfg = core.start_round()
        for session in sessions:
            fit = session.handle_round_config(_codec_roundtrip(cfg))
            core.receive_update(_codec_roundtrip(fit))
        core.finish_round()
        _log_central_eval(core, eval_fn)
    return SessionResult(core.global_params, core.metrics_log)


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise DataError(f"endpoint {endpoint!r} is not host:port")
    return host or "127.0.0.1", int(port)


def run_server(
    endpoint: str,
    n_clients: int,
    rounds: int,
    init_seed: int,
    hyper: Hyperparams,
    eval_fn=None,
    on_listening=None,
) -> SessionResult:
    """Socket deployment of the server core.

    Lifecycle per round: broadcast ROUND_CONFIG to every client, block until
    all have answered, aggregate; after the final round broadcast SHUTDOWN.
    Any client failure aborts the session with no partial aggregation.
    """
    host, port = parse_endpoint(endpoint)
    init_params = init_model(hyper.layer_sizes, init_seed)
    core = ServerCore(n_clients, rounds, init_params, hyper)
    listener = socket.create_server((host, port))
    listener.settimeout(SOCKET_TIMEOUT)
    conns: dict[str, socket.socket] = {}
    try:
        if on_listening is not None:
            on_listening(listener.getsockname()[1])
        while len(conns) < n_clients:
            conn, _ = listener.accept()
            conn.settimeout(SOCKET_TIMEOUT)
            msg = wire.read_message(conn)
            if not isinstance(msg, wire.Hello) or not core.register(msg.client_id):
                conn.close()  # duplicate id or bad handshake: reject at HELLO
                continue
            wire.write_message(conn, wire.Hello("server"))
            conns[msg.client_id] = conn
        ordered = [conns[cid] for cid in sorted(conns)]
        for _ in range(rounds):
            cfg = core.start_round()
            frame = wire.encode_message(cfg)
            for conn in ordered:
                conn.sendall(frame)
            for cid in sorted(conns):
                try:
                    reply = wire.read_message(conns[cid])
                except ProtocolError as exc:
                    raise ProtocolError(
                        f"round {core.round} failed: client {cid!r}: {exc}"
                    ) from exc
                if not isinstance(reply, wire.FitResult):
                    raise ProtocolError(
                        f"round {core.round} failed: client {cid!r} sent "
                        f"{type(reply).__name__}"
                    )
                core.receive_update(reply)
            core.finish_round()
            _log_central_eval(core, eval_fn)
        shutdown = wire.encode_message(wire.Shutdown())
        for conn in ordered:
            conn.sendall(shutdown)
    finally:
        for conn in conns.values():
            conn.close()
        listener.close()
    return SessionResult(core.global_params, core.metrics_log)


def run_client(
    endpoint: str, shard: RecordTable, client_id: str, train_seed: int
) -> dict:
    """Socket deployment of a client session; returns its session report."""
    host, port = parse_endpoint(endpoint)
    session = ClientSession(client_id, shard, train_seed)
    conn = socket.create_connection((host, port), timeout=SOCKET_TIMEOUT)
    try:
        wire.write_message(conn, wire.Hello(client_id))
        ack = wire.read_message(conn)
        if not isinstance(ack, wire.Hello):
            raise ProtocolError(f"expected HELLO ack, got {type(ack).__name__}")
        while True:
            msg = wire.read_message(conn)
            if isinstance(msg, wire.Shutdown):
                break
            if isinstance(msg, wire.RoundConfig):
                wire.write_message(conn, session.handle_round_config(msg))
            elif isinstance(msg, wire.EvalRequest):
                wire.write_message(conn, session.handle_eval_request(msg))
            else:
                raise ProtocolError(f"unexpected {type(msg).__name__} from server")
    finally:
        conn.close()
    return session.report
