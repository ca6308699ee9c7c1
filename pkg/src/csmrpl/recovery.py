"""SC recovery: unicast-flow breaks are repaired with a challenge/response
exchange built on a 3x3 linear system over a prime field; multicast-flow
breaks fall back to a unicast DIS probe answered by a regular DIO.

The field prime is the smallest prime above 2^32 so every 4-byte SC value
embeds injectively as a residue; recovery is exact, never approximate.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from . import wire
from .chain import FLOW_MC, FLOW_UC, ChainState

P = 4294967311  # smallest prime > 2^32
SC_LIMIT = 1 << 32


def mat_vec(a, x):
    """y = A.x mod P."""
    return tuple(sum(a_ij * x_j for a_ij, x_j in zip(row, x)) % P for row in a)


def solve(a, y):
    """Solve A.x = y mod P by Gaussian elimination with partial pivoting.

    Raises ValueError on a singular matrix.  Exact: prime-field arithmetic.
    """
    n = len(y)
    aug = [list(row) + [yi] for row, yi in zip(a, y)]
    for col in range(n):
        pivot = next((r for r in range(col, n) if aug[r][col] % P != 0), None)
        if pivot is None:
            raise ValueError("singular matrix")
        aug[col], aug[pivot] = aug[pivot], aug[col]
        inv = pow(aug[col][col], -1, P)
        aug[col] = [(v * inv) % P for v in aug[col]]
        for r in range(n):
            if r != col and aug[r][col] % P != 0:
                factor = aug[r][col]
                aug[r] = [(vr - factor * vc) % P
                          for vr, vc in zip(aug[r], aug[col])]
    return tuple(aug[i][n] for i in range(n))


def is_invertible(a) -> bool:
    try:
        solve(a, (0,) * len(a))
    except ValueError:
        return False
    return True


def random_invertible(rng: random.Random, n: int = 3):
    """3x3 matrix with entries uniform in [1, P), resampled until invertible."""
    while True:
        a = tuple(tuple(rng.randrange(1, P) for _ in range(n)) for _ in range(n))
        if is_invertible(a):
            return a


@dataclass
class RecoverySession:
    neighbor: int
    coeff: tuple
    attempts: int = 1
    deadline: int = 0  # sim-time us


@dataclass
class RecoveryConfig:
    timeout_us: int = 4_000_000
    max_attempts: int = 3
    cooldown_us: int = 60_000_000     # lockout after a failed session
    dis_probe_gap_us: int = 4_000_000  # min spacing of MC-break DIS probes


class RecoveryManager:
    """Per-node recovery state.  At most one live session per neighbor.

    Collaborators are injected: ``send_er(body, er_sc, dst)`` transmits an
    ER-flow frame, ``send_dis(dst)`` emits a regular unicast DIS through the
    normal chained pipeline, ``now()`` is sim time in us and ``schedule``
    books a callback.
    """

    def __init__(self, chain: ChainState, rng: random.Random, *,
                 now, schedule, send_er, send_dis,
                 config: RecoveryConfig | None = None):
        self.chain = chain
        self.rng = rng
        self.now = now
        self.schedule = schedule
        self.send_er = send_er
        self.send_dis = send_dis
        self.cfg = config or RecoveryConfig()
        self.sessions: dict[int, RecoverySession] = {}
        self._blocked_until: dict[int, int] = {}
        self._last_dis_probe: dict[int, int] = {}
        self._last_er_rotation = -(1 << 62)
        self.srreq_sent = 0
        self.srres_sent = 0
        self.recoveries_completed = 0

    # break handling

    def on_chain_break(self, flow: str, src: int) -> None:
        entry = self.chain.table.get(src)
        if entry is None:
            return  # unknown neighbors get nothing
        if flow == FLOW_MC:
            last = self._last_dis_probe.get(src, -(1 << 62))
            if self.now() - last >= self.cfg.dis_probe_gap_us:
                self._last_dis_probe[src] = self.now()
                self.send_dis(src)
        elif flow == FLOW_UC:
            if src in self.sessions:
                return  # deduplicated: at most one live session
            if self.now() < self._blocked_until.get(src, 0):
                return
            if entry.sc_er_tx == 0:
                return  # never learned the neighbor's ER value
            self._open_session(src)

    def _open_session(self, neighbor: int) -> None:
        coeff = random_invertible(self.rng)
        session = RecoverySession(neighbor, coeff,
                                  deadline=self.now() + self.cfg.timeout_us)
        self.sessions[neighbor] = session
        self._emit_srreq(session)

    def _emit_srreq(self, session: RecoverySession) -> None:
        entry = self.chain.table[session.neighbor]
        self.srreq_sent += 1
        self.send_er(wire.SrReq(session.coeff), entry.sc_er_tx, session.neighbor)
        self.schedule(self.cfg.timeout_us + 1000,
                      lambda: self._check_timeout(session.neighbor))

    def _check_timeout(self, neighbor: int) -> None:
        session = self.sessions.get(neighbor)
        if session is None or self.now() < session.deadline:
            return
        if session.attempts >= self.cfg.max_attempts:
            del self.sessions[neighbor]
            self._blocked_until[neighbor] = self.now() + self.cfg.cooldown_us
            return  # entry left broken; trust keeps decrementing
        session.attempts += 1
        session.coeff = random_invertible(self.rng)
        session.deadline = self.now() + self.cfg.timeout_us
        self._emit_srreq(session)

    # SRR message handling (frames already decoded under the ER SC)

    def on_srreq(self, req: wire.SrReq, src: int) -> None:
        entry = self.chain.ensure_entry(src)
        # rotate the announced ER value at most once per timeout window:
        # several neighbors recovering at once all learn the same fresh value
        if self.now() - self._last_er_rotation >= self.cfg.timeout_us:
            self._last_er_rotation = self.now()
            fresh_er = self.chain.rotate_er_rx()
        else:
            fresh_er = self.chain.ensure_er_rx()
        x = (entry.sc_uc_tx, self.chain.sc_mc_tx, fresh_er)
        y = mat_vec(req.coeff, x)
        self.srres_sent += 1
        res = wire.SrRes(src, y, fresh_er)
        self.send_er(res, entry.sc_er_tx, wire.MULTICAST)

    def on_srres(self, res: wire.SrRes, src: int) -> None:
        if res.target_addr != self.chain.addr:
            return  # not for me
        session = self.sessions.get(src)
        if session is None:
            return
        try:
            x = solve(session.coeff, res.results)
        except ValueError:
            x = None
        if x is None or any(v >= SC_LIMIT for v in x) or x[2] != res.new_sc_er:
            # tampering (or a broken responder): retry with fresh coefficients
            if session.attempts >= self.cfg.max_attempts:
                del self.sessions[src]
                self._blocked_until[src] = self.now() + self.cfg.cooldown_us
            else:
                session.attempts += 1
                session.coeff = random_invertible(self.rng)
                session.deadline = self.now() + self.cfg.timeout_us
                self._emit_srreq(session)
            return
        entry = self.chain.ensure_entry(src)
        entry.sc_uc_rx, entry.sc_mc_rx, entry.sc_er_tx = x
        del self.sessions[src]
        self.recoveries_completed += 1
