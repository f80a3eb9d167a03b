"""Energy and loss bookkeeping for closed-loop runs.

All quantities are work in J at the wheel. The energy input of a run is the
tractive work plus the engine energy burnt while idling and on gear changes;
it balances against the change in kinetic energy, the dissipative losses
and the work done by gravity.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .mpc import SimulationRecord
from .vehicle import VehicleParams, gravity_force, roll_force

CATEGORIES = ("roll", "air", "brake", "engine_drag", "idling", "gear_change")


@dataclass
class LossBreakdown:
    roll: float
    air: float
    brake: float
    engine_drag: float
    idling: float
    gear_change: float
    traction: float
    gravity_work: float  # work done on the vehicle by gravity (negative uphill)
    delta_K: float
    trip_time: float
    n_gear_changes: int

    @property
    def total(self) -> float:
        return self.roll + self.air + self.brake + self.engine_drag + self.idling + self.gear_change

    @property
    def energy_input(self) -> float:
        return self.traction + self.idling + self.gear_change

    def closure_error(self) -> float:
        """Relative mismatch of input = dK + losses - gravity work."""
        rhs = self.delta_K + self.total - self.gravity_work
        return abs(self.energy_input - rhs) / max(abs(self.energy_input), 1e-12)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        d["energy_input"] = self.energy_input
        return d


def decompose(rec: SimulationRecord, p: VehicleParams) -> LossBreakdown:
    """Split the run's energy into loss categories.

    Air drag is recovered from the exact step integral: over a step the
    remaining forces are constant, so their work minus the change in kinetic
    energy is exactly the air-drag work along the realized trajectory.
    """
    ds = rec.delta_s
    F_r = roll_force(rec.alpha, p)
    F_g = gravity_force(rec.alpha, p)
    drag = rec.F_dc * rec.z
    dK = np.diff(rec.K)
    const = rec.F_t + rec.F_b - drag + F_r + F_g
    air = const * ds - dK
    open_ = rec.z == 0
    return LossBreakdown(
        roll=float(np.sum(-F_r) * ds),
        air=float(np.sum(air)),
        brake=float(np.sum(-rec.F_b) * ds),
        engine_drag=float(np.sum(drag) * ds),
        idling=float(rec.idle_power * np.sum(rec.dt[open_])),
        gear_change=float(rec.beta_g * rec.n_gear_changes),
        traction=float(np.sum(rec.F_t) * ds),
        gravity_work=float(np.sum(F_g) * ds),
        delta_K=float(rec.K[-1] - rec.K[0]),
        trip_time=rec.trip_time,
        n_gear_changes=rec.n_gear_changes,
    )


@dataclass
class PolicyComparison:
    reference: str
    breakdowns: dict  # policy -> LossBreakdown

    def energy_pct(self, policy: str) -> float:
        return 100.0 * (self.breakdowns[policy].energy_input / self.breakdowns[self.reference].energy_input)

    def time_pct(self, policy: str) -> float:
        return 100.0 * (self.breakdowns[policy].trip_time / self.breakdowns[self.reference].trip_time)

    def savings_pct(self, policy: str) -> float:
        return 100.0 - self.energy_pct(policy)

    def category_pct(self, policy: str) -> dict:
        """Loss categories as % of the reference policy's energy input."""
        ref = self.breakdowns[self.reference].energy_input
        b = self.breakdowns[policy]
        return {k: 100.0 * getattr(b, k) / ref for k in CATEGORIES}

    def table(self) -> str:
        head = f"{'policy':<16}{'energy %':>10}{'time %':>9}" + "".join(f"{k:>13}" for k in CATEGORIES)
        lines = [head, "-" * len(head)]
        for name in self.breakdowns:
            cat = self.category_pct(name)
            lines.append(f"{name:<16}{self.energy_pct(name):>10.2f}{self.time_pct(name):>9.2f}"
                         + "".join(f"{cat[k]:>13.2f}" for k in CATEGORIES))
        return "\n".join(lines)

    def key_values(self) -> str:
        out = [f"reference={self.reference}"]
        for name, b in self.breakdowns.items():
            out.append(f"{name}.energy_pct={self.energy_pct(name)!r}")
            out.append(f"{name}.time_pct={self.time_pct(name)!r}")
            for k, v in b.as_dict().items():
                out.append(f"{name}.{k}={v!r}")
        return "\n".join(out) + "\n"


def compare_policies(records: dict, p: VehicleParams, reference: str = "benchmark") -> PolicyComparison:
    if reference not in records:
        raise ValueError(f"reference policy {reference!r} missing from records")
    return PolicyComparison(reference, {name: decompose(rec, p) for name, rec in records.items()})


def loss_report(b: LossBreakdown) -> str:
    rows = [(k, getattr(b, k)) for k in CATEGORIES]
    rows += [("total_losses", b.total), ("traction", b.traction), ("energy_input", b.energy_input),
             ("gravity_work", b.gravity_work), ("delta_K", b.delta_K)]
    lines = [f"{k}={v!r}" for k, v in rows]
    lines += [f"trip_time_s={b.trip_time!r}", f"gear_changes={b.n_gear_changes}",
              f"closure_rel_error={b.closure_error()!r}"]
    return "\n".join(lines) + "\n"
