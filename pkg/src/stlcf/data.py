"""Sparse rating containers, cross-domain alignment and holdout splitting.

Ratings live in immutable COO-style matrices with both row-major (by user)
and column-major (by item) traversal indexes, so per-item statistics are
O(1) and EM sweeps never re-sort. External entity ids are kept as opaque
strings; dense indices are assigned in first-appearance order, which makes
every construction deterministic for a given input.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

SHARED_USERS = "shared-users"
SHARED_ITEMS = "shared-items"
ORIENTATIONS = (SHARED_USERS, SHARED_ITEMS)

DEFAULT_RATING_BOUNDS = (1.0, 5.0)


class RatingsParseError(ValueError):
    """A line in a ratings stream could not be parsed."""

    def __init__(self, line_number, message):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class DuplicateRatingError(ValueError):
    """The same (user, item) pair was observed more than once."""


class RatingRangeError(ValueError):
    """A rating fell outside the configured [r_min, r_max] bounds."""


def check_rating_bounds(bounds):
    lo, hi = float(bounds[0]), float(bounds[1])
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise ValueError(f"invalid rating bounds {bounds!r}")
    return (lo, hi)


class RatingsMatrix:
    """Sparse user x item rating matrix for one domain.

    Parameters
    ----------
    n_users, n_items : int
        Dense axis sizes. May exceed the indices actually observed, so an
        entity with zero ratings is still representable.
    users, items : int arrays of shape (nnz,)
        Dense indices of each observation.
    ratings : float array of shape (nnz,)
        Observed values, all within ``rating_bounds``.
    user_ids, item_ids : sequence of str, optional
        External ids per dense index. Defaults to stringified indices.
    """

    def __init__(self, n_users, n_items, users, items, ratings,
                 user_ids=None, item_ids=None,
                 rating_bounds=DEFAULT_RATING_BOUNDS):
        self.n_users = int(n_users)
        self.n_items = int(n_items)
        self.rating_bounds = check_rating_bounds(rating_bounds)

        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        ratings = np.asarray(ratings, dtype=np.float64)
        if not (users.shape == items.shape == ratings.shape) or users.ndim != 1:
            raise ValueError("users, items and ratings must be 1-d and equally long")
        if users.size:
            if users.min() < 0 or users.max() >= self.n_users:
                raise ValueError("user index out of range")
            if items.min() < 0 or items.max() >= self.n_items:
                raise ValueError("item index out of range")
        self._check_values(ratings)

        # canonical row-major order; duplicates show up as adjacent pairs
        order = np.lexsort((items, users))
        self.users = users[order]
        self.items = items[order]
        self.ratings = ratings[order]
        if self.users.size > 1:
            same = (np.diff(self.users) == 0) & (np.diff(self.items) == 0)
            if same.any():
                j = int(np.nonzero(same)[0][0])
                raise DuplicateRatingError(
                    f"duplicate rating for user index {self.users[j]}, "
                    f"item index {self.items[j]}")

        self.user_ptr = np.zeros(self.n_users + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.users, minlength=self.n_users),
                  out=self.user_ptr[1:])
        # column-major view is a permutation of the same entries
        self.col_order = np.lexsort((self.users, self.items))
        self.item_ptr = np.zeros(self.n_items + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.items, minlength=self.n_items),
                  out=self.item_ptr[1:])

        if user_ids is None:
            user_ids = [str(u) for u in range(self.n_users)]
        if item_ids is None:
            item_ids = [str(i) for i in range(self.n_items)]
        if len(user_ids) != self.n_users or len(item_ids) != self.n_items:
            raise ValueError("id map length does not match axis size")
        self.user_ids = tuple(str(u) for u in user_ids)
        self.item_ids = tuple(str(i) for i in item_ids)
        self.user_index = {u: j for j, u in enumerate(self.user_ids)}
        self.item_index = {i: j for j, i in enumerate(self.item_ids)}
        if len(self.user_index) != self.n_users or len(self.item_index) != self.n_items:
            raise ValueError("external ids must be unique per axis")

        for arr in (self.users, self.items, self.ratings, self.user_ptr,
                    self.col_order, self.item_ptr):
            arr.setflags(write=False)

    def _check_values(self, ratings):
        if ratings.size == 0:
            return
        if not np.all(np.isfinite(ratings)):
            raise RatingRangeError("non-finite rating")
        lo, hi = self.rating_bounds
        if ratings.min() < lo or ratings.max() > hi:
            raise RatingRangeError(
                f"rating outside bounds [{lo}, {hi}]")

    @classmethod
    def from_triples(cls, triples, rating_bounds=DEFAULT_RATING_BOUNDS):
        """Build a matrix from (user_id, item_id, rating) triples.

        Dense indices follow first appearance order, so identical inputs
        always produce identical matrices.
        """
        user_index, item_index = {}, {}
        users, items, ratings = [], [], []
        for user_id, item_id, value in triples:
            user_id, item_id = str(user_id), str(item_id)
            users.append(user_index.setdefault(user_id, len(user_index)))
            items.append(item_index.setdefault(item_id, len(item_index)))
            ratings.append(float(value))
        return cls(len(user_index), len(item_index), users, items, ratings,
                   user_ids=list(user_index), item_ids=list(item_index),
                   rating_bounds=rating_bounds)

    @property
    def nnz(self):
        return int(self.ratings.size)

    @property
    def shape(self):
        return (self.n_users, self.n_items)

    def item_count(self, i):
        """Number of observed ratings in column ``i`` (O(1))."""
        return int(self.item_ptr[i + 1] - self.item_ptr[i])

    @property
    def item_counts(self):
        return np.diff(self.item_ptr)

    @property
    def user_counts(self):
        return np.diff(self.user_ptr)

    def user_slice(self, u):
        """(items, ratings) observed for user ``u``."""
        lo, hi = self.user_ptr[u], self.user_ptr[u + 1]
        return self.items[lo:hi], self.ratings[lo:hi]

    def item_slice(self, i):
        """(users, ratings) observed for item ``i``."""
        sel = self.col_order[self.item_ptr[i]:self.item_ptr[i + 1]]
        return self.users[sel], self.ratings[sel]

    def global_mean(self):
        if self.nnz == 0:
            lo, hi = self.rating_bounds
            return 0.5 * (lo + hi)
        return float(self.ratings.mean())

    def entry_set(self):
        """Set of dense (user, item, rating) tuples, for equality checks."""
        return {(int(u), int(i), float(r))
                for u, i, r in zip(self.users, self.items, self.ratings)}

    def triples(self):
        """Iterate (user_id, item_id, rating) in row-major order."""
        for u, i, r in zip(self.users, self.items, self.ratings):
            yield self.user_ids[u], self.item_ids[i], float(r)

    def transpose(self):
        """Swap axes: entry (u, i, r) becomes (i, u, r)."""
        return RatingsMatrix(
            self.n_items, self.n_users, self.items, self.users, self.ratings,
            user_ids=self.item_ids, item_ids=self.user_ids,
            rating_bounds=self.rating_bounds)

    def _with_rows(self, row_of_id, n_rows, row_ids):
        """Re-map the user axis into a new dense space keyed by external id."""
        lookup = np.array([row_of_id[uid] for uid in self.user_ids],
                          dtype=np.int64)
        new_users = lookup[self.users] if self.nnz else np.empty(0, np.int64)
        return RatingsMatrix(n_rows, self.n_items, new_users, self.items,
                             self.ratings, user_ids=row_ids,
                             item_ids=self.item_ids,
                             rating_bounds=self.rating_bounds)

    def subset(self, keep):
        """New matrix restricted to the entry positions in ``keep``."""
        keep = np.asarray(keep, dtype=np.int64)
        return RatingsMatrix(self.n_users, self.n_items, self.users[keep],
                             self.items[keep], self.ratings[keep],
                             user_ids=self.user_ids, item_ids=self.item_ids,
                             rating_bounds=self.rating_bounds)

    def __repr__(self):
        return (f"RatingsMatrix({self.n_users}x{self.n_items}, "
                f"nnz={self.nnz})")


@dataclass(frozen=True)
class AlignedCollection:
    """One target plus N source matrices sharing one axis.

    Under ``shared-users`` every matrix's user axis lives in one dense
    space of size ``shared_axis_size``; under ``shared-items`` the item
    axes do. ``N = 0`` degenerates to single-domain learning.
    """

    target: RatingsMatrix
    sources: tuple
    orientation: str
    shared_axis_size: int

    @property
    def n_sources(self):
        return len(self.sources)

    @property
    def domains(self):
        return (self.target,) + tuple(self.sources)

    def shared_rows(self):
        """Domains viewed with the shared axis on rows.

        The shared-items case reduces to shared-users by transposition, so
        model code only ever sees matrices whose rows are the shared axis
        and whose columns carry per-domain instance weights.
        """
        if self.orientation == SHARED_USERS:
            return self.domains
        return tuple(m.transpose() for m in self.domains)

    def replace_target(self, target):
        if self.orientation == SHARED_USERS:
            if target.n_users != self.shared_axis_size:
                raise ValueError("target user axis must stay in shared space")
        elif target.n_items != self.shared_axis_size:
            raise ValueError("target item axis must stay in shared space")
        return AlignedCollection(target, self.sources, self.orientation,
                                 self.shared_axis_size)


def single_domain(matrix):
    """Wrap one matrix as a degenerate aligned collection (no sources)."""
    return AlignedCollection(matrix, (), SHARED_USERS, matrix.n_users)


def align_domains(target, sources, orientation=SHARED_USERS):
    """Re-index all domains into one shared dense axis.

    The shared space is the union of external ids on the shared axis, in
    first-appearance order (target first, then each source), so entities
    present only in source domains stay representable.
    """
    if orientation not in ORIENTATIONS:
        raise ValueError(f"orientation must be one of {ORIENTATIONS}")
    sources = tuple(sources)
    matrices = (target,) + sources
    if orientation == SHARED_ITEMS:
        matrices = tuple(m.transpose() for m in matrices)

    row_of_id = {}
    for m in matrices:
        for uid in m.user_ids:
            row_of_id.setdefault(uid, len(row_of_id))
    row_ids = list(row_of_id)
    n_rows = len(row_ids)

    rebuilt = [m._with_rows(row_of_id, n_rows, row_ids) for m in matrices]
    if orientation == SHARED_ITEMS:
        rebuilt = [m.transpose() for m in rebuilt]
    return AlignedCollection(rebuilt[0], tuple(rebuilt[1:]), orientation,
                             n_rows)


@dataclass(frozen=True)
class HoldoutSplit:
    train: RatingsMatrix
    test: RatingsMatrix
    fraction: float
    seed: int


def split_holdout(matrix, fraction, seed):
    """Uniformly random disjoint train/test split, reproducible from seed."""
    fraction = float(fraction)
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must be in [0, 1)")
    n_test = int(round(fraction * matrix.nnz))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(matrix.nnz)
    test_pos = np.sort(perm[:n_test])
    train_pos = np.sort(perm[n_test:])
    return HoldoutSplit(matrix.subset(train_pos), matrix.subset(test_pos),
                        fraction, int(seed))


_FIELDS = ("user", "item", "rating")


def parse_ratings(lines, schema=_FIELDS, rating_bounds=DEFAULT_RATING_BOUNDS):
    """Parse ``user,item,rating`` text lines into a RatingsMatrix.

    ``schema`` permutes the column order. Blank lines and ``#`` comments
    are skipped; errors carry the 1-based line number.
    """
    schema = tuple(schema)
    if sorted(schema) != sorted(_FIELDS):
        raise ValueError(f"schema must be a permutation of {_FIELDS}")
    col = {name: schema.index(name) for name in _FIELDS}
    lo, hi = check_rating_bounds(rating_bounds)
    if isinstance(lines, str):
        lines = lines.splitlines()

    triples = []
    for line_number, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise RatingsParseError(line_number,
                                    f"expected 3 comma-separated fields, got {len(parts)}")
        try:
            value = float(parts[col["rating"]])
        except ValueError:
            raise RatingsParseError(
                line_number, f"rating {parts[col['rating']]!r} is not a number") from None
        if not np.isfinite(value):
            raise RatingRangeError(f"line {line_number}: non-finite rating")
        if not lo <= value <= hi:
            raise RatingRangeError(
                f"line {line_number}: rating {value} outside [{lo}, {hi}]")
        triples.append((parts[col["user"]], parts[col["item"]], value))
    return RatingsMatrix.from_triples(triples, rating_bounds=rating_bounds)


def load_ratings(path, schema=_FIELDS, rating_bounds=DEFAULT_RATING_BOUNDS):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_ratings(fh, schema=schema, rating_bounds=rating_bounds)


def format_ratings(matrix):
    """Serialize to the one-triple-per-line text format (round-trips exactly)."""
    return "".join(f"{u},{i},{r!r}\n" for u, i, r in matrix.triples())


def write_ratings(matrix, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_ratings(matrix))


def write_split(split, outdir, prefix="target"):
    """Write a holdout split as two ratings files plus a JSON sidecar."""
    os.makedirs(outdir, exist_ok=True)
    train_path = os.path.join(outdir, f"{prefix}_train.csv")
    test_path = os.path.join(outdir, f"{prefix}_test.csv")
    write_ratings(split.train, train_path)
    write_ratings(split.test, test_path)
    sidecar = {"fraction": split.fraction, "seed": split.seed,
               "train_nnz": split.train.nnz, "test_nnz": split.test.nnz}
    with open(os.path.join(outdir, f"{prefix}_split.json"), "w",
              encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return train_path, test_path
