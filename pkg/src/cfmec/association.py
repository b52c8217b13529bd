"""Pilot assignment, AP-user association and user-to-server compute support."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .config import ConfigError
from .errors import InfeasibleError

CPU = -1


@dataclass(frozen=True)
class ServingTopology:
    """Radio association: pilots and the boolean D_lk pattern."""

    pilot_of: np.ndarray   # (K,) ints in [0, tau_p)
    serves: np.ndarray     # (L, K) bool, True iff D_lk = I_M

    @property
    def n_aps(self) -> int:
        return self.serves.shape[0]

    @property
    def n_users(self) -> int:
        return self.serves.shape[1]

    @cached_property
    def serving_aps(self) -> list[np.ndarray]:
        """M_k for every user."""
        return [np.flatnonzero(self.serves[:, k]) for k in range(self.n_users)]

    @cached_property
    def served_users(self) -> list[np.ndarray]:
        """K_l for every AP."""
        return [np.flatnonzero(self.serves[l]) for l in range(self.n_aps)]

    @cached_property
    def overlap(self) -> np.ndarray:
        """(K, K) bool, True iff D_k D_i != 0 (the sets S_k as rows)."""
        s = self.serves.astype(int)
        return (s.T @ s) > 0

    @cached_property
    def partial_sets(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.overlap[k]) for k in range(self.n_users)]

    @property
    def active_aps(self) -> np.ndarray:
        return np.flatnonzero(self.serves.any(axis=1))

    def b_vectors(self) -> np.ndarray:
        """Rows b_k in the (K + K L) compute-vector layout."""
        n_l, n_k = self.serves.shape
        b = np.zeros((n_k, n_k + n_k * n_l))
        for k in range(n_k):
            b[k, k] = 1.0
            b[k, n_k + k * n_l: n_k + (k + 1) * n_l] = self.serves[:, k]
        return b

    def c_vectors(self) -> np.ndarray:
        """Rows c_l in the (K + K L) compute-vector layout."""
        n_l, n_k = self.serves.shape
        c = np.zeros((n_l, n_k + n_k * n_l))
        for l in range(n_l):
            for k in range(n_k):
                c[l, n_k + k * n_l + l] = float(self.serves[l, k])
        return c

    def with_serves(self, serves: np.ndarray) -> "ServingTopology":
        return ServingTopology(self.pilot_of.copy(), np.asarray(serves, dtype=bool))

    def dump_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ap_index", "user_index", "pilot"])
            for l, k in zip(*np.nonzero(self.serves)):
                w.writerow([int(l), int(k), int(self.pilot_of[k])])


def assign_pilots_dcc(beta: np.ndarray, tau_p: int) -> ServingTopology:
    """Greedy joint pilot assignment and user-centric (DCC) AP selection.

    Users are processed in index order. Each user is anchored at its best AP
    that still has a pilot not held by another anchored user (normally its
    master AP), and takes the free pilot with the least received co-pilot gain
    there. Every AP then serves, on each pilot, its anchored user if it has
    one, otherwise the co-pilot user with the largest gain. Ties go to the
    lowest pilot and user index. Each AP serves at most ``tau_p`` users and
    every user is served at least by its anchor.
    """
    n_l, n_k = beta.shape
    pilot_of = np.full(n_k, -1)
    owner = np.full((n_l, tau_p), -1)
    for k in range(n_k):
        anchor = -1
        for l in np.argsort(-beta[:, k], kind="stable"):
            if np.any(owner[l] < 0):
                anchor = int(l)
                break
        if anchor < 0:  # more users than L * tau_p slots
            raise ConfigError("not enough (AP, pilot) slots to anchor every user")
        free = np.flatnonzero(owner[anchor] < 0)
        load = np.array([beta[anchor, (pilot_of[:k] == t).nonzero()[0]].sum() for t in free])
        t = int(free[np.argmin(load)])
        pilot_of[k] = t
        owner[anchor, t] = k

    serves = np.zeros((n_l, n_k), dtype=bool)
    for l in range(n_l):
        for t in range(tau_p):
            if owner[l, t] >= 0:
                serves[l, owner[l, t]] = True
                continue
            users = np.flatnonzero(pilot_of == t)
            if users.size:
                serves[l, users[np.argmax(beta[l, users])]] = True
    return ServingTopology(pilot_of, serves)


def reduce_fcc(topology: ServingTopology, beta: np.ndarray, g: int) -> ServingTopology:
    """Keep, per user, only its ``g`` strongest serving APs."""
    if g < 1:
        raise ConfigError("FCC cluster size must be >= 1")
    serves = np.zeros_like(topology.serves)
    for k, aps in enumerate(topology.serving_aps):
        order = aps[np.argsort(-beta[aps, k], kind="stable")]
        serves[order[:g], k] = True
    return topology.with_serves(serves)


def reduce_lsfbs(topology: ServingTopology, beta: np.ndarray, threshold: float = 0.95) -> ServingTopology:
    """Keep, per user, the shortest strongest-first prefix holding ``threshold`` of its gain."""
    if not 0.0 < threshold <= 1.0:
        raise ConfigError("LSFBS threshold must lie in (0, 1]")
    serves = np.zeros_like(topology.serves)
    for k, aps in enumerate(topology.serving_aps):
        order = aps[np.argsort(-beta[aps, k], kind="stable")]
        gains = np.cumsum(beta[order, k])
        # relative slack guards the equal-gain case against rounding
        n_keep = int(np.searchsorted(gains, threshold * gains[-1] * (1 - 1e-12))) + 1
        serves[order[:n_keep], k] = True
    return topology.with_serves(serves)


def associate_cellular(beta: np.ndarray, tau_p: int) -> ServingTopology:
    """Each user is served only by its strongest BS; pilots assigned greedily per BS."""
    n_l, n_k = beta.shape
    bs = np.argmax(beta, axis=0)
    pilot_of = np.full(n_k, -1)
    for k in range(n_k):
        assigned = pilot_of[:k]
        load = np.array([beta[bs[k], np.flatnonzero(assigned == t)].sum() for t in range(tau_p)])
        pilot_of[k] = int(np.argmin(load))
    serves = np.zeros((n_l, n_k), dtype=bool)
    serves[bs, np.arange(n_k)] = True
    return ServingTopology(pilot_of, serves)


def apply_selection(topology: ServingTopology, beta: np.ndarray, kind: str,
                    param: float | None) -> ServingTopology:
    if kind == "dcc":
        return topology
    if kind == "fcc":
        return reduce_fcc(topology, beta, int(param))
    if kind == "lsfbs":
        return reduce_lsfbs(topology, beta, float(param))
    raise ConfigError(f"unknown AP selection {kind!r}")


def switched_off_fraction(topology: ServingTopology) -> float:
    return 1.0 - topology.active_aps.size / topology.n_aps


# ---------------------------------------------------------------------------
# Compute support: which MEC servers may process which user's task.


@dataclass(frozen=True)
class ComputeSupport:
    """Servers with capacities and the user-to-server eligibility pattern.

    Server 0 is the CPU when ``has_cpu``; the remaining servers are the radio
    sites in index order. Each True entry of ``allowed`` is one scalar
    compute variable (an entry of the stacked vector f).
    """

    capacity: np.ndarray   # (S,)
    allowed: np.ndarray    # (K, S) bool
    has_cpu: bool
    n_sites: int

    @property
    def n_users(self) -> int:
        return self.allowed.shape[0]

    @cached_property
    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        users, servers = np.nonzero(self.allowed)
        return users, servers

    @property
    def n_vars(self) -> int:
        return int(self.allowed.sum())

    def user_matrix(self) -> np.ndarray:
        """(K, n_vars) 0/1 matrix mapping pair variables to per-user totals f_k."""
        users, _ = self.pairs
        a = np.zeros((self.n_users, users.size))
        a[users, np.arange(users.size)] = 1.0
        return a

    def server_matrix(self) -> np.ndarray:
        """(S, n_vars) 0/1 matrix mapping pair variables to per-server loads."""
        _, servers = self.pairs
        a = np.zeros((self.capacity.size, servers.size))
        a[servers, np.arange(servers.size)] = 1.0
        return a

    def server_rank(self) -> np.ndarray:
        """Tie-break rank per pair variable: CPU first, then sites by index."""
        _, servers = self.pairs
        return servers.astype(float)

    def to_layout(self, values: np.ndarray) -> np.ndarray:
        """Scatter pair values into the (K + K L) vector [f_cpu_k..., f_ap_{l,k}...]."""
        n_k, n_l = self.n_users, self.n_sites
        out = np.zeros(n_k + n_k * n_l)
        users, servers = self.pairs
        for v, k, s in zip(values, users, servers):
            if self.has_cpu and s == 0:
                out[k] = v
            else:
                l = s - 1 if self.has_cpu else s
                out[n_k + k * n_l + l] = v
        return out

    def per_user(self, values: np.ndarray) -> np.ndarray:
        return self.user_matrix() @ values

    def per_server(self, values: np.ndarray) -> np.ndarray:
        return self.server_matrix() @ values


def cellfree_support(topology: ServingTopology, f_cpu: float, f_ap: np.ndarray) -> ComputeSupport:
    n_k = topology.n_users
    allowed = np.concatenate([np.ones((n_k, 1), dtype=bool), topology.serves.T], axis=1)
    cap = np.concatenate([[f_cpu], f_ap]).astype(float)
    return ComputeSupport(cap, allowed, True, topology.n_aps)


def cellular_support(topology: ServingTopology, f_bs: np.ndarray) -> ComputeSupport:
    return ComputeSupport(np.asarray(f_bs, dtype=float), topology.serves.T.copy(), False,
                          topology.n_aps)


@dataclass(frozen=True)
class CranAssociation:
    server_of: np.ndarray     # (K,) CPU (-1) or AP index
    f_heuristic: np.ndarray   # (K + K L,) compute vector, mu_k at the chosen server
    mu: np.ndarray            # (K,) cycles/s

    def support(self, f_cpu: float, f_ap: np.ndarray) -> ComputeSupport:
        n_k, n_l = self.server_of.size, len(f_ap)
        allowed = np.zeros((n_k, n_l + 1), dtype=bool)
        allowed[np.arange(n_k), self.server_of + 1] = True
        cap = np.concatenate([[f_cpu], f_ap]).astype(float)
        return ComputeSupport(cap, allowed, True, n_l)


def cran_demands(cycles: np.ndarray, bits: np.ndarray, budget: np.ndarray,
                 se: np.ndarray, bandwidth: float) -> np.ndarray:
    """mu_k = w_k / (L~_k - (b_k / B) / SE_k); raises if the SE cannot meet the budget."""
    with np.errstate(divide="ignore"):
        slack = budget - (bits / bandwidth) / se
    if np.any(~(slack > 0)):
        bad = np.flatnonzero(~(slack > 0)).tolist()
        raise InfeasibleError("cran-association",
                              f"spectral efficiency too low for the latency budget (users {bad})")
    return cycles / slack


def associate_cran(mu: np.ndarray, f_cpu: float, f_ap: np.ndarray) -> CranAssociation:
    """Heuristic one-to-one user-to-MEC-server association.

    Users are visited by decreasing demand; each goes to the CPU when its
    demand fits the remaining CPU capacity, otherwise to the AP with the most
    remaining capacity if it fits there.
    """
    mu = np.asarray(mu, dtype=float)
    f_ap = np.asarray(f_ap, dtype=float)
    n_k, n_l = mu.size, f_ap.size
    cpu_left = float(f_cpu)
    ap_used = np.zeros(n_l)
    server_of = np.full(n_k, CPU)
    f = np.zeros(n_k + n_k * n_l)
    for k in np.argsort(-mu, kind="stable"):
        ap_left = f_ap - ap_used
        best = int(np.argmax(ap_left))
        if mu[k] < cpu_left:
            f[k] = mu[k]
            cpu_left -= mu[k]
        elif mu[k] < ap_left[best]:
            server_of[k] = best
            ap_used[best] += mu[k]
            f[n_k + k * n_l + best] = mu[k]
        else:
            raise InfeasibleError("cran-association",
                                  "computational resource allocation problem unfeasible "
                                  f"(user {int(k)} fits no MEC server)")
    return CranAssociation(server_of, f, mu)
