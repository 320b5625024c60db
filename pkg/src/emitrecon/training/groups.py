"""Uncertain/certain ray partition, threshold schedule and stratified batching."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ThresholdSchedule:
    """k_i rising linearly from ``floor`` to ``cap`` starting at ``start``."""

    slope: float
    start: int = 0
    floor: float = 1e-5
    cap: float = 1e-3

    def __post_init__(self):
        if self.slope < 0 or not 0 < self.floor <= self.cap:
            raise ValueError("need slope >= 0 and 0 < floor <= cap")

    @classmethod
    def over(cls, start: int, steps: int, floor: float = 1e-5, cap: float = 1e-3) -> "ThresholdSchedule":
        """Schedule reaching ``cap`` after ``steps`` steps."""
        return cls((cap - floor) / max(steps, 1), start, floor, cap)

    def __call__(self, step: int) -> float:
        return float(min(self.cap, max(self.floor, self.floor + self.slope * (step - self.start))))


@dataclass
class RayGroups:
    """Partition of ray ids 0..n-1; ``uncertain`` is a boolean membership mask."""

    uncertain: np.ndarray
    step: int = 0
    k: float = 0.0
    interval: int = 1000
    history: list = field(default_factory=list)

    @classmethod
    def initial(cls, n_rays: int, interval: int = 1000) -> "RayGroups":
        return cls(np.ones(n_rays, dtype=bool), interval=interval)

    @property
    def n_rays(self) -> int:
        return self.uncertain.shape[0]

    @property
    def certain(self) -> np.ndarray:
        return ~self.uncertain

    @property
    def uncertain_ids(self) -> np.ndarray:
        return np.flatnonzero(self.uncertain)

    @property
    def certain_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.uncertain)

    def sizes(self) -> tuple[int, int]:
        u = int(self.uncertain.sum())
        return u, self.n_rays - u


def update_ray_groups(groups: RayGroups, strengths: np.ndarray, k: float, step: int | None = None) -> RayGroups:
    """Keep uncertain rays whose expected emission strength reaches ``k``.

    ``strengths`` holds one value per currently uncertain ray, in id order.
    Rays below the threshold join the certain group; certain rays never
    return.
    """
    ids = groups.uncertain_ids
    strengths = np.asarray(strengths, dtype=np.float64).reshape(-1)
    if strengths.shape[0] != ids.shape[0]:
        raise ValueError("need one strength per uncertain ray")
    keep = strengths >= k
    new = groups.uncertain.copy()
    new[ids[~keep]] = False
    history = groups.history + [(groups.step if step is None else step, float(k), int(new.sum()))]
    return RayGroups(new, groups.step if step is None else step, float(k), groups.interval, history)


_STREAMS = {"uncertain": 1, "certain": 2}


def _digest(ids: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(ids, dtype=np.int64).tobytes()).hexdigest()


class StratifiedBatcher:
    """Mini-batches drawn from both groups in proportion to their sizes.

    Within a group, ids are visited in a random order without replacement;
    a fresh permutation is drawn when a group is exhausted or changes.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._state = {}

    def _take(self, name: str, ids: np.ndarray, count: int) -> np.ndarray:
        if count == 0 or ids.size == 0:
            return np.zeros(0, dtype=np.int64)
        st = self._state.get(name)
        if st is None or st["n"] != ids.size or not np.array_equal(st["ids"], ids):
            st = {"ids": ids, "n": ids.size, "epoch": 0, "perm": None, "pos": ids.size}
            self._state[name] = st
        out = []
        while count > 0:
            if st["pos"] >= st["n"]:
                st["perm"] = self._perm(name, st["epoch"], st["n"])
                st["pos"] = 0
                st["epoch"] += 1
            take = min(count, st["n"] - st["pos"])
            out.append(st["ids"][st["perm"][st["pos"]:st["pos"] + take]])
            st["pos"] += take
            count -= take
        return np.concatenate(out)

    def _perm(self, name: str, epoch: int, n: int) -> np.ndarray:
        return np.random.Generator(np.random.PCG64([self.seed, _STREAMS[name], epoch])).permutation(n)

    def state_dict(self) -> dict:
        return {name: {"epoch": st["epoch"], "pos": st["pos"], "n": st["n"], "ids": _digest(st["ids"])}
                for name, st in self._state.items()}

    def load_state_dict(self, state: dict, groups: RayGroups) -> None:
        """Restore positions; the permutations are regenerated from the seed.

        A saved group that no longer matches ``groups`` is dropped, as the
        next draw would have restarted it anyway.
        """
        self._state = {}
        for name, st in state.items():
            ids = groups.uncertain_ids if name == "uncertain" else groups.certain_ids
            if ids.size != st["n"] or st.get("ids") != _digest(ids):
                continue
            perm = self._perm(name, st["epoch"] - 1, st["n"]) if st["epoch"] > 0 else None
            self._state[name] = {"ids": ids, "n": st["n"], "epoch": st["epoch"], "perm": perm, "pos": st["pos"]}

    def __call__(self, groups: RayGroups, batch_size: int) -> np.ndarray:
        u_ids, c_ids = groups.uncertain_ids, groups.certain_ids
        n_u = int(round(batch_size * u_ids.size / max(groups.n_rays, 1)))
        if c_ids.size == 0:
            n_u = batch_size
        elif u_ids.size == 0:
            n_u = 0
        n_u = min(n_u, batch_size)
        return np.concatenate([self._take("uncertain", u_ids, n_u),
                               self._take("certain", c_ids, batch_size - n_u)])


def make_batch(groups: RayGroups, batch_size: int, batcher: StratifiedBatcher | None = None) -> np.ndarray:
    """Ray ids of one stratified mini-batch."""
    return (batcher or StratifiedBatcher())(groups, batch_size)
