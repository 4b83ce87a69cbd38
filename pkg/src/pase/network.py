"""Radial feeder representation, CSV loading and the DLF matrix.

Bus 0 is the substation (slack) and carries no load. Every other bus is fed
by exactly one branch, so branch data is stored per receiving bus. Loads are
read as three-phase totals in kW/kvar and kept internally in W/var; the
slack voltage is used directly as the single-phase-equivalent base, which
makes per-unit results identical to the usual three-phase per-unit model.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

DEFAULT_SLACK_VOLTAGE = 12.66e3
DEFAULT_BASE_POWER = 1e6

__all__ = [
    "NetworkError",
    "NetworkModel",
    "load_network",
    "bundled_feeder_path",
    "dlf_matrix",
    "path_incidence",
    "admittance_matrix",
]


class NetworkError(ValueError):
    """Raised for malformed feeder files or non-radial topologies."""


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """Immutable radial network.

    Arrays indexed by bus (length ``n_buses``) use entry 0 for the slack bus:
    ``parent[0] == -1`` and ``z[0] == 0``.
    """

    parent: np.ndarray
    z: np.ndarray
    p_load: np.ndarray
    q_load: np.ndarray
    slack_voltage: float = DEFAULT_SLACK_VOLTAGE
    base_power: float = DEFAULT_BASE_POWER
    name: str = ""
    _order: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for attr in ("parent", "z", "p_load", "q_load"):
            arr = np.array(getattr(self, attr))
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)
        _validate_tree(self.parent)
        if np.any(self.z.real < 0):
            bad = int(np.flatnonzero(self.z.real < 0)[0])
            raise NetworkError(f"branch feeding bus {bad} has negative resistance")
        if self.p_load[0] != 0 or self.q_load[0] != 0:
            raise NetworkError("slack bus 0 must not carry load")
        if self.slack_voltage <= 0 or self.base_power <= 0:
            raise NetworkError("slack voltage and base power must be positive")
        object.__setattr__(self, "_order", _topological_order(self.parent))

    @property
    def n_buses(self) -> int:
        return len(self.parent)

    @property
    def n_load(self) -> int:
        """Number of non-slack buses (the state dimension is twice this)."""
        return len(self.parent) - 1

    @property
    def load_buses(self) -> np.ndarray:
        return np.arange(1, self.n_buses)

    @property
    def branches(self) -> list[tuple[int, int, complex]]:
        return [(int(self.parent[i]), i, complex(self.z[i])) for i in range(1, self.n_buses)]

    @property
    def base_impedance(self) -> float:
        return self.slack_voltage**2 / self.base_power

    @property
    def base_injection(self) -> np.ndarray:
        """Base-case injections ``[P; Q]`` over load buses (loads negative)."""
        return -np.concatenate([self.p_load[1:], self.q_load[1:]])

    def to_pu_voltage(self, v):
        return np.asarray(v) / self.slack_voltage

    def to_pu_power(self, s):
        return np.asarray(s) / self.base_power

    def to_pu_impedance(self, z):
        return np.asarray(z) / self.base_impedance

    def bus_order(self) -> np.ndarray:
        """Buses in root-to-leaf (breadth-first) order."""
        return self._order


def _validate_tree(parent: np.ndarray) -> None:
    n = len(parent)
    if n < 2:
        raise NetworkError("network needs the slack bus and at least one load bus")
    if parent[0] != -1:
        raise NetworkError("bus 0 must be the root")
    for i in range(1, n):
        seen = {i}
        j = i
        while j != 0:
            j = int(parent[j])
            if j < 0 or j >= n:
                raise NetworkError(f"bus {i} is not connected to the slack bus")
            if j in seen:
                raise NetworkError(f"loop detected through bus {i}")
            seen.add(j)


def _topological_order(parent: np.ndarray) -> np.ndarray:
    children: dict[int, list[int]] = {}
    for i in range(1, len(parent)):
        children.setdefault(int(parent[i]), []).append(i)
    order, queue = [], [0]
    while queue:
        b = queue.pop(0)
        order.append(b)
        queue.extend(sorted(children.get(b, [])))
    return np.array(order)


def bundled_feeder_path() -> Path:
    """Path of the packaged 33-bus feeder CSV."""
    return Path(str(resources.files("pase") / "data" / "ieee33.csv"))


def load_network(
    path: str | Path | None = None,
    slack_voltage: float = DEFAULT_SLACK_VOLTAGE,
    base_power: float = DEFAULT_BASE_POWER,
) -> NetworkModel:
    """Read a feeder CSV (``from,to,r_ohm,x_ohm,p_kw,q_kvar``).

    Lines starting with ``#`` are comments. Branch orientation in the file is
    free; the tree is re-rooted at bus 0 but each load stays with the ``to``
    column of its row. Defaults to the bundled 33-bus feeder.
    """
    path = Path(path) if path is not None else bundled_feeder_path()
    rows = []
    with open(path, newline="") as fh:
        lines = [(k, ln) for k, ln in enumerate(fh, start=1) if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise NetworkError(f"{path}: empty feeder file")
    reader = csv.reader([ln for _, ln in lines])
    header = [h.strip() for h in next(reader)]
    expected = ["from", "to", "r_ohm", "x_ohm", "p_kw", "q_kvar"]
    if header != expected:
        raise NetworkError(f"{path}:{lines[0][0]}: expected header {','.join(expected)}, got {','.join(header)}")
    for (lineno, _), rec in zip(lines[1:], reader):
        if len(rec) != 6:
            raise NetworkError(f"{path}:{lineno}: expected 6 fields, got {len(rec)}")
        try:
            f, t = int(rec[0]), int(rec[1])
            r, x, p, q = (float(v) for v in rec[2:])
        except ValueError as exc:
            raise NetworkError(f"{path}:{lineno}: {exc}") from None
        rows.append((lineno, f, t, r, x, p, q))
    return _build(rows, str(path), slack_voltage, base_power)


def _build(rows, name, slack_voltage, base_power) -> NetworkModel:
    if not rows:
        raise NetworkError(f"{name}: no branches")
    buses = {0}
    for lineno, f, t, *_ in rows:
        if f < 0 or t < 0:
            raise NetworkError(f"{name}:{lineno}: negative bus index")
        if f == t:
            raise NetworkError(f"{name}:{lineno}: self-loop on bus {f}")
        buses.update((f, t))
    n = max(buses) + 1
    missing = sorted(set(range(n)) - buses)
    if missing:
        raise NetworkError(f"{name}: bus {missing[0]} is disconnected (no branch)")
    if len(rows) != n - 1:
        raise NetworkError(
            f"{name}: non-radial topology: {len(rows)} branches for {n - 1} non-slack buses"
        )

    adj: dict[int, list[tuple[int, int]]] = {}
    for k, (_, f, t, *_rest) in enumerate(rows):
        adj.setdefault(f, []).append((t, k))
        adj.setdefault(t, []).append((f, k))
    parent = np.full(n, -1, dtype=int)
    branch_of = np.full(n, -1, dtype=int)
    visited = {0}
    queue = [0]
    while queue:
        b = queue.pop(0)
        for nb, k in adj.get(b, []):
            if nb in visited:
                if parent[b] != nb or branch_of[b] != k:
                    raise NetworkError(f"{name}:{rows[k][0]}: non-radial topology, branch closes a loop at bus {nb}")
                continue
            visited.add(nb)
            parent[nb] = b
            branch_of[nb] = k
            queue.append(nb)
    if len(visited) != n:
        lost = min(set(range(n)) - visited)
        raise NetworkError(f"{name}: bus {lost} is disconnected from the slack bus")

    z = np.zeros(n, dtype=complex)
    p = np.zeros(n)
    q = np.zeros(n)
    for i in range(1, n):
        _, _, _, r, x, _, _ = rows[branch_of[i]]
        z[i] = complex(r, x)
    for lineno, _, t, _, _, pk, qk in rows:
        if t == 0 and (pk or qk):
            raise NetworkError(f"{name}:{lineno}: load on slack bus 0")
        p[t] += pk * 1e3
        q[t] += qk * 1e3
    return NetworkModel(parent=parent, z=z, p_load=p, q_load=q,
                        slack_voltage=slack_voltage, base_power=base_power, name=name)


def path_incidence(net: NetworkModel) -> np.ndarray:
    """Matrix ``B`` with ``B[i, b] = 1`` if the branch feeding load bus ``b+1``
    lies on the slack-to-bus-``i+1`` path (both indexed over load buses)."""
    n = net.n_load
    B = np.zeros((n, n))
    for i in range(1, net.n_buses):
        j = i
        while j != 0:
            B[i - 1, j - 1] = 1.0
            j = int(net.parent[j])
    return B


def dlf_matrix(net: NetworkModel) -> np.ndarray:
    """Common-path impedance matrix over load buses, in ohms.

    ``M[i, j]`` is the summed impedance of branches shared by the paths from
    the slack to buses ``i`` and ``j``. ``w = V0 + M conj(s) / V0`` is the
    linearised power flow.
    """
    B = path_incidence(net)
    M = (B * net.z[1:]) @ B.T
    M.setflags(write=False)
    return M


def admittance_matrix(net: NetworkModel) -> np.ndarray:
    """Dense bus admittance matrix over all buses (slack included)."""
    n = net.n_buses
    Y = np.zeros((n, n), dtype=complex)
    for i in range(1, n):
        j = int(net.parent[i])
        y = 1.0 / net.z[i]
        Y[i, i] += y
        Y[j, j] += y
        Y[i, j] -= y
        Y[j, i] -= y
    return Y
