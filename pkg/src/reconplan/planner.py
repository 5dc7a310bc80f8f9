"""Planning MDP over secure states and the reconnaissance-then-plan pipeline.

The planning MDP lives on the secure states only.  Whenever the original
dynamics leave the secure set, the agent follows the baseline's
threat-minimizing fallback until it re-enters; that excursion is folded into
a *detour*: a transition that may advance the clock by several steps and that
carries the reward collected on the way.  Because detours consume time, every
kernel here is time-indexed.

All rewards inside the planning MDP use absolute-time discounting
(``gamma^k`` for the reward of step ``k``) so that excursions of different
lengths compose without rescaling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cmdp import (
    Cmdp,
    Policy,
    SafetySpec,
    argmax_lowest,
    require_valid,
)
from .secure import SecureSet, accident_threshold, build_secure_set, secure_threshold
from .threat import ThreatTable, min_threat_policy, threat_for_mode


class PmdpError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Pmdp:
    base: Cmdp
    secure: SecureSet
    sec_idx: np.ndarray  # original indices of secure states
    ns_idx: np.ndarray  # original indices of non-secure states
    restricted_actions: np.ndarray  # (n_sec, A) bool
    direct: np.ndarray  # (n_sec, A, n_sec): P(s2 | s1, a) for secure targets
    to_ns: np.ndarray  # (n_sec, A, n_ns): P(u | s1, a) for non-secure targets
    entry: np.ndarray  # (T + 1, n_ns, T + 1, n_sec): first re-entry from u at tau
    entry_reward: np.ndarray  # (T + 1, n_ns): reward earned on the excursion from u at tau
    initial: np.ndarray  # (n_sec,)

    @property
    def horizon(self) -> int:
        return self.base.horizon

    @property
    def n_secure(self) -> int:
        return self.sec_idx.size

    def immediate_reward(self, t: int) -> np.ndarray:
        """Restricted reward of acting at time ``t`` (absolute discount)."""
        return self.base.gamma ** (t + 1) * self.base.reward[self.sec_idx]

    def detour_kernel(self, t: int) -> np.ndarray:
        """``K[s1, a, tau, s2]``: probability that acting at ``t`` next lands in secure ``s2`` at time ``tau``."""
        T = self.horizon
        out = np.zeros((self.n_secure, self.base.n_actions, T + 1, self.n_secure))
        out[:, :, t + 1, :] = self.direct
        if self.ns_idx.size:
            out += np.einsum("sau,ukv->sakv", self.to_ns, self.entry[t + 1])
        return out

    def detour_reward(self, t: int) -> np.ndarray:
        """Expected reward earned inside excursions started by acting at ``t``."""
        if not self.ns_idx.size:
            return np.zeros((self.n_secure, self.base.n_actions))
        return self.to_ns @ self.entry_reward[t + 1]

    def truncation(self, t: int) -> np.ndarray:
        """Probability that the excursion started at ``t`` outlasts the horizon."""
        return 1.0 - self.detour_kernel(t).sum(axis=(2, 3))

    def collapsed_kernel(self, t: int) -> np.ndarray:
        """Clock-free view ``P(s2 | s1, a) + P(detour to s2)``."""
        return self.detour_kernel(t).sum(axis=2)

    def _continuation(self, t: int, V: np.ndarray) -> np.ndarray:
        """``(n_sec, A)`` expected future value after acting at ``t``, given ``V[tau, s]``."""
        cont = self.direct @ V[t + 1]
        if self.ns_idx.size:
            w = np.einsum("uks,ks->u", self.entry[t + 1], V) + self.entry_reward[t + 1]
            cont = cont + self.to_ns @ w
        return cont

    def optimal_values(self) -> tuple[np.ndarray, np.ndarray]:
        """Backward induction over restricted actions; returns ``(V, greedy)``."""
        T = self.horizon
        V = np.zeros((T + 1, self.n_secure))
        greedy = np.zeros((T, self.n_secure), dtype=int)
        for t in range(T - 1, -1, -1):
            Q = self.immediate_reward(t) + self._continuation(t, V)
            Q = np.where(self.restricted_actions, Q, -np.inf)
            greedy[t] = argmax_lowest(Q)
            V[t] = Q[np.arange(self.n_secure), greedy[t]]
        return V, greedy

    def evaluate(self, policy: Policy) -> float:
        """Expected return of ``policy`` computed on the planning MDP alone.

        Only the policy's rows for secure states are read.
        """
        policy.check_compatible(self.base)
        T = self.horizon
        arrive = np.zeros((T + 1, self.n_secure))
        arrive[0] = self.initial
        total = 0.0
        for t in range(T):
            w = arrive[t][:, None] * policy.probs[t][self.sec_idx]
            total += float(np.sum(w * (self.immediate_reward(t) + self.detour_reward(t))))
            arrive[t + 1] += np.einsum("sa,sab->b", w, self.direct)
            if self.ns_idx.size:
                q = np.einsum("sa,sau->u", w, self.to_ns)
                arrive += np.einsum("u,uks->ks", q, self.entry[t + 1])
        return total


def build_pmdp(cmdp: Cmdp, secure: SecureSet, threat: ThreatTable | None = None) -> Pmdp:
    """Construct the planning MDP from the original CMDP and a secure set."""
    T, S, A = cmdp.horizon, cmdp.n_states, cmdp.n_actions
    if secure.secure_actions.shape != (S, A) or secure.fallback.shape != (T, S):
        raise PmdpError("secure set does not match the CMDP")
    if threat is not None and threat.values.shape != (T, S, A):
        raise PmdpError("threat table does not match the CMDP")
    sec_idx = np.flatnonzero(secure.secure_states)
    ns_idx = np.flatnonzero(~secure.secure_states)
    if sec_idx.size == 0:
        raise PmdpError("no secure states: the planning MDP is empty")
    outside = cmdp.initial[ns_idx].sum()
    if outside > 0:
        raise PmdpError(f"initial distribution puts mass {outside:.3g} outside the secure states")

    P = cmdp.dense_transition()
    n_ns, n_sec = ns_idx.size, sec_idx.size
    direct = P[np.ix_(sec_idx, np.arange(A), sec_idx)]
    to_ns = P[np.ix_(sec_idx, np.arange(A), ns_idx)]
    entry = np.zeros((T + 1, n_ns, T + 1, n_sec))
    entry_reward = np.zeros((T + 1, n_ns))
    for tau in range(T - 1, 0, -1):
        fb = secure.fallback[tau, ns_idx]
        P_fb = P[ns_idx, fb]  # (n_ns, S)
        entry[tau, :, tau + 1, :] = P_fb[:, sec_idx]
        stay_out = P_fb[:, ns_idx]
        entry[tau] += np.einsum("uv,vks->uks", stay_out, entry[tau + 1])
        entry_reward[tau] = cmdp.gamma ** (tau + 1) * cmdp.reward[ns_idx, fb] + stay_out @ entry_reward[tau + 1]
    return Pmdp(
        base=cmdp,
        secure=secure,
        sec_idx=sec_idx,
        ns_idx=ns_idx,
        restricted_actions=secure.secure_actions[sec_idx],
        direct=direct,
        to_ns=to_ns,
        entry=entry,
        entry_reward=entry_reward,
        initial=cmdp.initial[sec_idx].copy(),
    )


def complete_policy(pmdp: Pmdp, secure_actions_by_t: np.ndarray) -> Policy:
    """Extend a ``(T, n_sec)`` action choice to the original CMDP with fallbacks."""
    actions = pmdp.secure.fallback.copy()
    actions[:, pmdp.sec_idx] = secure_actions_by_t
    return Policy.from_actions(actions, pmdp.base.n_actions)


def solve_pmdp(pmdp: Pmdp) -> Policy:
    """Reward-optimal pool member: best restricted action on secure states, fallback elsewhere."""
    _, greedy = pmdp.optimal_values()
    return complete_policy(pmdp, greedy)


@dataclass(frozen=True, eq=False)
class RpResult:
    policy: Policy
    eta: Policy
    threat: ThreatTable
    secure: SecureSet | None
    certified: bool
    x_star: float
    budget: float
    diagnostic: str = ""
    pmdp: Pmdp | None = None

    def to_dict(self) -> dict:
        doc = self.policy.to_dict()
        doc.update(certified=self.certified, x_star=self.x_star, budget=self.budget)
        if self.diagnostic:
            doc["diagnostic"] = self.diagnostic
        return doc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))


def threshold_for(spec: SafetySpec, cmdp: Cmdp, z: float = 1.0) -> float:
    if spec.mode == "discounted-danger":
        return secure_threshold(spec.budget, cmdp.beta, cmdp.horizon)
    return accident_threshold(spec.budget, cmdp.horizon, z)


def rp_solve(
    cmdp: Cmdp,
    spec: SafetySpec,
    eta: Policy | None = None,
    strict_gate: bool = False,
) -> RpResult:
    """Reconnaissance (baseline + threat), secure pool, then reward planning.

    The gate requires, for every initial state, that the baseline's expected
    threat is within the threshold (or every supported action's threat when
    ``strict_gate``) and that the state itself is secure.  When the gate fails
    the baseline is returned uncertified.
    """
    require_valid(cmdp)
    if eta is None:
        eta, threat = min_threat_policy(cmdp, spec.mode)
    else:
        eta.check_compatible(cmdp)
        threat = threat_for_mode(cmdp, eta, spec.mode)
    x = threshold_for(spec, cmdp)
    secure = build_secure_set(threat, x)

    problems = []
    for s0 in np.flatnonzero(cmdp.initial > 0):
        support = eta.probs[0, s0] > 0
        if strict_gate:
            level = float(threat.values[0, s0][support].max())
        else:
            level = float(eta.probs[0, s0] @ threat.values[0, s0])
        if level > x:
            problems.append(f"baseline threat {level:.6g} at initial state {s0} exceeds x*={x:.6g}")
        elif not secure.secure_states[s0]:
            problems.append(f"initial state {s0} has no secure action at threshold x*={x:.6g}")
    if problems:
        return RpResult(
            policy=eta, eta=eta, threat=threat, secure=secure, certified=False,
            x_star=x, budget=spec.budget, diagnostic="; ".join(problems),
        )
    pmdp = build_pmdp(cmdp, secure, threat)
    return RpResult(
        policy=solve_pmdp(pmdp), eta=eta, threat=threat, secure=secure, certified=True,
        x_star=x, budget=spec.budget, pmdp=pmdp,
    )


__all__ = [
    "Pmdp",
    "PmdpError",
    "RpResult",
    "build_pmdp",
    "complete_policy",
    "rp_solve",
    "solve_pmdp",
    "threshold_for",
]
