"""Model specifications for confirmatory graded response models.

A specification fixes the shape of the model: the number of items J, the
category count K_j of each item (codes 0..K_j-1), the number of latent
factors P, linear equality constraints on the loadings, and which factor
correlations are free.

Loading constraints follow the linear form

    beta_j = b_j + A_j @ beta_free_j

with a P-vector of constants ``b_j`` and a P x P constant matrix ``A_j``
per item.  Free loading parameters live in one global vector so that a
single parameter may be shared by several (item, factor) slots; this is
how equality ties across items (e.g. a doublet factor measured by two
items with equal loadings) are expressed.

Correlation constraints are expressed on the angles of the hyperspherical
parameterization of the correlation Cholesky factor: an angle fixed at
pi/2 zeroes the corresponding Cholesky entry, and fixing a whole row plus
the matching column entries makes a factor orthogonal to all others.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

HALF_PI = math.pi / 2.0

#: Loading-pattern entry meaning "a new free parameter".
FREE = "free"


class SpecError(ValueError):
    """Raised when a model specification document is malformed."""


@dataclass(frozen=True)
class ModelSpec:
    """Shape and constraint pattern of a confirmatory graded response model.

    Attributes:
        item_categories: (J,) int array, K_j >= 2 for every item.
        n_factors: number of latent factors P >= 0.  P = 0 is the
            zero-factor baseline (intercepts only).
        loading_offsets: (J, P) array of constants b_j.
        loading_maps: (J, P, P) array of constraint matrices A_j.
        loading_slots: (J, P) int array mapping each free-loading slot to
            an id in the global free-loading vector; -1 marks inert slots
            (columns of A_j that are identically zero).
        angle_fixed: (P, P) bool array (strict lower triangle) marking
            correlation angles that are held fixed during estimation.
        angle_fixed_values: (P, P) array with the fixed angle values
            (ignored where ``angle_fixed`` is False).
    """

    item_categories: np.ndarray
    n_factors: int
    loading_offsets: np.ndarray
    loading_maps: np.ndarray
    loading_slots: np.ndarray
    n_free_loadings: int
    angle_fixed: np.ndarray
    angle_fixed_values: np.ndarray
    source: dict | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        cats = np.asarray(self.item_categories, dtype=int)
        if cats.ndim != 1 or cats.size == 0:
            raise SpecError("item_categories must be a nonempty 1-D sequence")
        if np.any(cats < 2):
            raise SpecError("every item needs at least 2 categories")
        if self.n_factors < 0:
            raise SpecError("n_factors must be >= 0")
        J, P = cats.size, self.n_factors
        object.__setattr__(self, "item_categories", cats)
        for name, shape in [
            ("loading_offsets", (J, P)),
            ("loading_maps", (J, P, P)),
            ("loading_slots", (J, P)),
        ]:
            arr = np.asarray(getattr(self, name))
            if arr.shape != shape:
                raise SpecError(f"{name} must have shape {shape}, got {arr.shape}")
            object.__setattr__(self, name, arr)
        fixed = np.asarray(self.angle_fixed, dtype=bool)
        vals = np.asarray(self.angle_fixed_values, dtype=float)
        if fixed.shape != (P, P) or vals.shape != (P, P):
            raise SpecError("angle arrays must have shape (P, P)")
        object.__setattr__(self, "angle_fixed", fixed)
        object.__setattr__(self, "angle_fixed_values", vals)

    # ----- basic shape queries -------------------------------------------------

    @property
    def n_items(self) -> int:
        return int(self.item_categories.size)

    @property
    def max_categories(self) -> int:
        return int(self.item_categories.max())

    @property
    def n_free_intercepts(self) -> int:
        return int(np.sum(self.item_categories - 1))

    @property
    def intercept_mask(self) -> np.ndarray:
        """(J, Kmax-1) bool mask of valid intercept positions."""
        J, Km = self.n_items, self.max_categories
        k = np.arange(Km - 1)[None, :]
        return k < (self.item_categories[:, None] - 1)

    def free_angle_pairs(self) -> list[tuple[int, int]]:
        """Strict-lower-triangle (row, col) pairs of free correlation angles."""
        pairs = []
        for p in range(self.n_factors):
            for q in range(p):
                if not self.angle_fixed[p, q]:
                    pairs.append((p, q))
        return pairs

    @property
    def n_free_angles(self) -> int:
        return len(self.free_angle_pairs())

    @property
    def n_free_parameters(self) -> int:
        """Fitted model parameters: intercepts + loadings + correlation angles."""
        return self.n_free_intercepts + self.n_free_loadings + self.n_free_angles

    # ----- loading pattern queries ---------------------------------------------

    def nonzero_pattern(self) -> np.ndarray:
        """(J, P) bool array: slots where the materialized loading can be nonzero."""
        nonzero = np.abs(self.loading_offsets) > 0
        nonzero |= np.any(np.abs(self.loading_maps) > 0, axis=2)
        return nonzero

    def nonzero_loadings_per_factor(self) -> np.ndarray:
        """(P,) counts of nonzero-pattern loadings per factor."""
        return self.nonzero_pattern().sum(axis=0).astype(int)

    def slot_factor(self) -> np.ndarray:
        """(n_free_loadings,) factor index associated with each free parameter.

        A parameter shared across slots takes the factor of its first slot.
        """
        factor = np.full(self.n_free_loadings, -1, dtype=int)
        for j in range(self.n_items):
            for p in range(self.n_factors):
                s = self.loading_slots[j, p]
                if s >= 0 and factor[s] < 0:
                    factor[s] = p
        return factor

    def validate_responses(self, responses: np.ndarray) -> None:
        """Check an N x J integer matrix against the category bounds."""
        responses = np.asarray(responses)
        if responses.ndim != 2 or responses.shape[1] != self.n_items:
            raise SpecError(
                f"response matrix must have {self.n_items} columns, "
                f"got shape {responses.shape}"
            )
        if responses.size == 0:
            return
        if np.any(responses < 0):
            raise SpecError("negative category code in response matrix")
        over = responses >= self.item_categories[None, :]
        if np.any(over):
            i, j = np.argwhere(over)[0]
            raise SpecError(
                f"response code {responses[i, j]} at row {i}, item {j} exceeds "
                f"K_j - 1 = {self.item_categories[j] - 1}"
            )


# ----- construction ---------------------------------------------------------


def from_pattern(
    item_categories,
    n_factors: int,
    patterns,
    orthogonal_factors=(),
    fixed_angles=(),
    source: dict | None = None,
) -> ModelSpec:
    """Compile a compact loading pattern into a full ModelSpec.

    Args:
        item_categories: K_j per item.
        n_factors: P.
        patterns: per item, a length-P sequence whose entries are "free"
            (new free parameter), a number (fixed value), or ("tie", name)
            (free parameter shared by every slot carrying the same name).
        orthogonal_factors: factor indices constrained to be uncorrelated
            with all other factors (their angles are fixed at pi/2).
        fixed_angles: iterable of (p, q, value) with p > q fixing single
            correlation angles.
    """
    cats = np.asarray(item_categories, dtype=int)
    J, P = cats.size, int(n_factors)
    if len(patterns) != J:
        raise SpecError(f"need one loading pattern per item ({J}), got {len(patterns)}")

    offsets = np.zeros((J, P))
    maps = np.zeros((J, P, P))
    slots = np.full((J, P), -1, dtype=int)
    tie_ids: dict[str, int] = {}
    next_id = 0

    for j, row in enumerate(patterns):
        if len(row) != P:
            raise SpecError(f"item {j}: pattern has {len(row)} entries, expected {P}")
        for p, entry in enumerate(row):
            if isinstance(entry, str) and entry == FREE:
                maps[j, p, p] = 1.0
                slots[j, p] = next_id
                next_id += 1
            elif isinstance(entry, dict) and "tie" in entry:
                name = str(entry["tie"])
                if name not in tie_ids:
                    tie_ids[name] = next_id
                    next_id += 1
                maps[j, p, p] = 1.0
                slots[j, p] = tie_ids[name]
            elif isinstance(entry, tuple) and len(entry) == 2 and entry[0] == "tie":
                name = str(entry[1])
                if name not in tie_ids:
                    tie_ids[name] = next_id
                    next_id += 1
                maps[j, p, p] = 1.0
                slots[j, p] = tie_ids[name]
            elif isinstance(entry, (int, float)) and not isinstance(entry, bool):
                offsets[j, p] = float(entry)
            else:
                raise SpecError(
                    f"item {j}, factor {p}: bad loading entry {entry!r} "
                    '(expected "free", a number, or {"tie": name})'
                )

    angle_fixed, angle_values = _compile_angles(P, orthogonal_factors, fixed_angles)
    spec = ModelSpec(
        item_categories=cats,
        n_factors=P,
        loading_offsets=offsets,
        loading_maps=maps,
        loading_slots=slots,
        n_free_loadings=next_id,
        angle_fixed=angle_fixed,
        angle_fixed_values=angle_values,
        source=source,
    )
    _warn_identification(spec)
    return spec


def from_matrices(
    item_categories,
    offsets,
    maps,
    orthogonal_factors=(),
    fixed_angles=(),
    source: dict | None = None,
) -> ModelSpec:
    """Build a ModelSpec from explicit per-item (b_j, A_j) matrices.

    Every column of A_j with a nonzero entry becomes its own free
    parameter; cross-item ties are only available through the pattern
    grammar.
    """
    cats = np.asarray(item_categories, dtype=int)
    offsets = np.asarray(offsets, dtype=float)
    maps = np.asarray(maps, dtype=float)
    J = cats.size
    P = offsets.shape[1] if offsets.ndim == 2 else 0
    slots = np.full((J, P), -1, dtype=int)
    next_id = 0
    for j in range(J):
        for p in range(P):
            if np.any(maps[j, :, p] != 0.0):
                slots[j, p] = next_id
                next_id += 1
    angle_fixed, angle_values = _compile_angles(P, orthogonal_factors, fixed_angles)
    spec = ModelSpec(
        item_categories=cats,
        n_factors=P,
        loading_offsets=offsets,
        loading_maps=maps,
        loading_slots=slots,
        n_free_loadings=next_id,
        angle_fixed=angle_fixed,
        angle_fixed_values=angle_values,
        source=source,
    )
    _warn_identification(spec)
    return spec


def simple_structure(
    item_categories,
    item_factor,
    n_factors: int | None = None,
    orthogonal_factors=(),
    fixed_angles=(),
) -> ModelSpec:
    """Each item loads freely on exactly one factor; all else fixed at zero."""
    item_factor = list(item_factor)
    P = int(n_factors) if n_factors is not None else (max(item_factor) + 1)
    patterns = []
    for f in item_factor:
        row: list = [0.0] * P
        row[f] = FREE
        patterns.append(row)
    return from_pattern(
        item_categories, P, patterns, orthogonal_factors, fixed_angles
    )


def zero_factor(item_categories) -> ModelSpec:
    """The zero-factor baseline: intercepts only."""
    cats = np.asarray(item_categories, dtype=int)
    J = cats.size
    return ModelSpec(
        item_categories=cats,
        n_factors=0,
        loading_offsets=np.zeros((J, 0)),
        loading_maps=np.zeros((J, 0, 0)),
        loading_slots=np.full((J, 0), -1, dtype=int),
        n_free_loadings=0,
        angle_fixed=np.zeros((0, 0), dtype=bool),
        angle_fixed_values=np.zeros((0, 0)),
    )


def _compile_angles(P, orthogonal_factors, fixed_angles):
    fixed = np.zeros((P, P), dtype=bool)
    values = np.full((P, P), HALF_PI)
    for f in orthogonal_factors:
        f = int(f)
        if not 0 <= f < P:
            raise SpecError(f"orthogonal factor index {f} out of range for P={P}")
        for q in range(f):
            fixed[f, q] = True
            values[f, q] = HALF_PI
        for p in range(f + 1, P):
            fixed[p, f] = True
            values[p, f] = HALF_PI
    for p, q, value in fixed_angles:
        p, q, value = int(p), int(q), float(value)
        if not (0 <= q < p < P):
            raise SpecError(f"fixed angle ({p}, {q}) is not strictly lower triangular")
        if not 0.0 < value <= math.pi:
            raise SpecError(f"fixed angle value {value} outside (0, pi]")
        fixed[p, q] = True
        values[p, q] = value
    return fixed, values


def _warn_identification(spec: ModelSpec) -> None:
    if spec.n_factors == 0:
        return
    counts = np.zeros(spec.n_factors, dtype=int)
    for j in range(spec.n_items):
        for p in range(spec.n_factors):
            if spec.loading_slots[j, p] >= 0 and np.any(
                spec.loading_maps[j, :, p] != 0.0
            ):
                target_rows = np.nonzero(spec.loading_maps[j, :, p])[0]
                counts[target_rows] += 1
    for p in range(spec.n_factors):
        if counts[p] == 0:
            logger.warning(
                "factor %d has no free loadings; the model may not be identified", p
            )


# ----- JSON document form ----------------------------------------------------


def from_json_dict(doc: dict) -> ModelSpec:
    """Parse the JSON model-spec document format.

    Expected layout::

        {
          "factors": 2,
          "items": [
            {"categories": 3, "loadings": ["free", 0]},
            {"categories": 3, "loadings": [0, {"tie": "d1"}]},
            {"categories": 3, "loadings": {"b": [0, 0], "A": [[1, 0], [0, 0]]}}
          ],
          "correlations": {"orthogonal_factors": [1], "fixed_angles": [[1, 0, 1.57]]}
        }

    Loading entries: "free", a number (fixed value), or {"tie": name}.
    An item may instead give explicit {"b": ..., "A": ...} matrices.
    """
    if not isinstance(doc, dict):
        raise SpecError("spec document must be a JSON object")
    try:
        P = int(doc["factors"])
        items = doc["items"]
    except KeyError as exc:
        raise SpecError(f"spec document missing required key: {exc}") from exc
    if not isinstance(items, list) or not items:
        raise SpecError('"items" must be a nonempty list')

    corr = doc.get("correlations", {}) or {}
    ortho = corr.get("orthogonal_factors", [])
    fixed = [tuple(t) for t in corr.get("fixed_angles", [])]

    cats = []
    patterns = []
    explicit_b = []
    explicit_a = []
    any_explicit = False
    for j, item in enumerate(items):
        if not isinstance(item, dict) or "categories" not in item:
            raise SpecError(f"item {j}: expected an object with a 'categories' key")
        cats.append(int(item["categories"]))
        loadings = item.get("loadings", [0.0] * P)
        if isinstance(loadings, dict):
            any_explicit = True
            b = np.asarray(loadings.get("b", np.zeros(P)), dtype=float)
            A = np.asarray(loadings.get("A"), dtype=float)
            if b.shape != (P,) or A.shape != (P, P):
                raise SpecError(f"item {j}: explicit b must be ({P},) and A ({P}, {P})")
            explicit_b.append(b)
            explicit_a.append(A)
            patterns.append(None)
        else:
            if len(loadings) != P:
                raise SpecError(f"item {j}: {len(loadings)} loadings, expected {P}")
            patterns.append(list(loadings))
            explicit_b.append(None)
            explicit_a.append(None)

    if any_explicit and any(p is not None for p in patterns):
        raise SpecError("mixing explicit (b, A) items and pattern items is not supported")
    if any_explicit:
        return from_matrices(cats, np.array(explicit_b), np.array(explicit_a), ortho, fixed, source=doc)

    # normalize JSON dict ties
    norm = []
    for row in patterns:
        out = []
        for entry in row:
            if isinstance(entry, dict):
                if set(entry) != {"tie"}:
                    raise SpecError(f"bad loading object {entry!r}: only {{'tie': name}} allowed")
                out.append(entry)
            else:
                out.append(entry)
        norm.append(out)
    return from_pattern(cats, P, norm, ortho, fixed, source=doc)


def to_json_dict(spec: ModelSpec) -> dict:
    """Serialize a ModelSpec to the JSON document form (explicit matrices)."""
    if spec.source is not None:
        return spec.source
    items = []
    for j in range(spec.n_items):
        items.append(
            {
                "categories": int(spec.item_categories[j]),
                "loadings": {
                    "b": spec.loading_offsets[j].tolist(),
                    "A": spec.loading_maps[j].tolist(),
                },
            }
        )
    fixed = [
        [p, q, float(spec.angle_fixed_values[p, q])]
        for p in range(spec.n_factors)
        for q in range(p)
        if spec.angle_fixed[p, q]
    ]
    doc = {"factors": spec.n_factors, "items": items}
    if fixed:
        doc["correlations"] = {"fixed_angles": fixed}
    return doc
