"""Per-category daily panels and the closed-form daily-density aggregation."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from cfattrib.errors import (
    DimensionMismatch,
    EmptyInput,
    MissingColumn,
    NonPositiveVolume,
)
from cfattrib.graph import DAILY_DENSITY, ad_node, den_node, qv_node


def aggregate_daily_density(den: Sequence[float], qv: Sequence[float]) -> float:
    """Query-volume weighted mean of category densities.

    >>> aggregate_daily_density([2.0, 4.0], [100.0, 300.0])
    3.5
    """
    den = np.asarray(den, dtype=float)
    qv = np.asarray(qv, dtype=float)
    if den.size == 0 or qv.size == 0:
        raise EmptyInput("aggregate_daily_density needs at least one category")
    if den.shape != qv.shape:
        raise DimensionMismatch(f"den has shape {den.shape} but qv has shape {qv.shape}")
    if np.any(qv <= 0):
        raise NonPositiveVolume(f"query volumes must be positive, got min {qv.min()}")
    return float(np.dot(den, qv) / qv.sum())


def _daily_density_series(den: np.ndarray, qv: np.ndarray) -> np.ndarray:
    return (den * qv).sum(axis=0) / qv.sum(axis=0)


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Daily query volume, ad demand and matching density for k categories.

    Arrays are shaped ``(k, T)``; day ``t`` is column ``t``. The daily density
    ``y`` is always derived from ``den`` and ``qv``.
    """

    categories: tuple[str, ...]
    qv: np.ndarray
    ad: np.ndarray
    den: np.ndarray
    y: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "categories", tuple(str(c) for c in self.categories))
        shape = (len(self.categories), None)
        for name in ("qv", "ad", "den"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.ndim != 2 or arr.shape[0] != shape[0]:
                raise DimensionMismatch(f"{name} must be shaped (k={shape[0]}, T), got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (self.qv.shape == self.ad.shape == self.den.shape):
            raise DimensionMismatch("qv, ad and den must share one shape")
        if len(set(self.categories)) != len(self.categories):
            raise DimensionMismatch("category names must be unique")
        if self.qv.size and np.any(self.qv <= 0):
            c, t = np.argwhere(self.qv <= 0)[0]
            raise NonPositiveVolume(f"query volume for {self.categories[c]!r} on day {t} is {self.qv[c, t]}")
        y = _daily_density_series(self.den, self.qv)
        y.setflags(write=False)
        object.__setattr__(self, "y", y)

    @property
    def k(self) -> int:
        return len(self.categories)

    @property
    def T(self) -> int:
        return self.qv.shape[1]

    @property
    def days(self) -> np.ndarray:
        return np.arange(self.T)

    def node_table(self) -> dict[str, np.ndarray]:
        """Series keyed by graph node name (see :func:`cfattrib.graph.ad_matching_graph`)."""
        table: dict[str, np.ndarray] = {}
        for i, c in enumerate(self.categories):
            table[ad_node(c)] = self.ad[i]
            table[qv_node(c)] = self.qv[i]
            table[den_node(c)] = self.den[i]
        table[DAILY_DENSITY] = self.y
        return table

    def replace(self, *, qv=None, ad=None, den=None) -> PanelDataset:
        return PanelDataset(
            self.categories,
            qv=self.qv if qv is None else qv,
            ad=self.ad if ad is None else ad,
            den=self.den if den is None else den,
        )

    def inputs_at(self, t: int) -> np.ndarray:
        """Flat input row ``[ad_1..ad_k, qv_1..qv_k]`` for day ``t``."""
        return np.concatenate([self.ad[:, t], self.qv[:, t]])

    def input_names(self) -> list[str]:
        return [ad_node(c) for c in self.categories] + [qv_node(c) for c in self.categories]


Table = Mapping[str, np.ndarray]


def as_table(data) -> Table:
    """Accept a :class:`PanelDataset` or any mapping of node name -> series."""
    if isinstance(data, PanelDataset):
        return data.node_table()
    if isinstance(data, Mapping):
        return {name: np.asarray(series, dtype=float) for name, series in data.items()}
    raise TypeError(f"expected a PanelDataset or a mapping of series, got {type(data).__name__}")


def column(table: Table, name: str) -> np.ndarray:
    try:
        return table[name]
    except KeyError:
        raise MissingColumn(f"no data column for node {name!r}") from None
