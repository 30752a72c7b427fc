"""Base-2 digital nets, Owen nested-permutation scrambling, and
counter-based uniform streams.

Scrambling is lazy: in base 2 the permutation at a tree node is a single
flip bit, derived by hashing (seed, dimension, node id). Two scrambles
built from the same net agree in every digit level whose node bits they
share, so trees that share levels 1..L produce paired points with
|y_n - z_n| <= 2^-L componentwise, exactly.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations

import numpy as np

MAX_DIGITS = 53  # double-precision mantissa; digits beyond this do not exist
_MASK64 = (1 << 64) - 1

_DIM_SALT = np.uint64(0x9E3779B97F4A7C15)
_NODE_SALT = np.uint64(0xD1B54A32D192ED03)
_JITTER_SALT = np.uint64(0x8CB92BA72F3D8DD7)


def _splitmix64(x):
    """One splitmix64 finalizer round on uint64 scalars or arrays."""
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def fold_seed(seed, *keys):
    """Derive a child 64-bit seed from a parent seed and integer keys."""
    h = _splitmix64(np.uint64(int(seed) & _MASK64))
    for k in keys:
        h = _splitmix64(h ^ np.uint64(int(k) & _MASK64))
    return int(h)


def fold_seed_array(seed, keys):
    """Vectorized fold_seed over an integer key array -> uint64 array."""
    h = _splitmix64(np.uint64(int(seed) & _MASK64))
    return _splitmix64(h ^ np.asarray(keys, dtype=np.uint64))


# ---------------------------------------------------------------------------
# direction numbers and raw net generation
# ---------------------------------------------------------------------------

_ASSET = os.path.join(os.path.dirname(__file__), "assets",
                      "sobol_direction_numbers.txt")


@lru_cache(maxsize=1)
def _direction_table():
    """Parse the bundled table: per dimension (degree, a, m_init)."""
    rows = []
    with open(_ASSET) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            parts = [int(p) for p in line.split()]
            rows.append((parts[1], parts[2], parts[3:]))
    return rows


def max_dimension():
    """Largest supported net dimension (van der Corput + table rows)."""
    return len(_direction_table()) + 1


@lru_cache(maxsize=64)
def _direction_integers(s, m):
    """Direction integers V[j, k] scaled to m digits, digits 1..m only.

    V[j, k] is m_k * 2^(m-1-k) for dimension j; XORing over the set bits
    of the point index yields net points with exactly m binary digits.
    """
    table = _direction_table()
    if s > len(table) + 1:
        raise ValueError(
            f"dimension {s} exceeds the bundled direction-number table "
            f"({len(table) + 1} dimensions)")
    V = np.zeros((s, max(m, 1)), dtype=np.uint64)
    V[0] = [1 << (m - 1 - k) for k in range(m)] if m else []
    for j in range(1, s):
        e, a, m_init = table[j - 1]
        mk = list(m_init)
        for k in range(e, m):
            new = mk[k - e] ^ (mk[k - e] << e)
            for i in range(1, e):
                if (a >> (e - 1 - i)) & 1:
                    new ^= mk[k - i] << i
            mk.append(new)
        for k in range(m):
            V[j, k] = mk[k] << (m - 1 - k)
    return V


def sobol_t_bound(s):
    """Classic t-value bound: sum of (polynomial degree - 1) over dims."""
    table = _direction_table()
    if s > len(table) + 1:
        raise ValueError(f"dimension {s} exceeds the direction-number table")
    return sum(table[j - 1][0] - 1 for j in range(1, s))


@dataclass(frozen=True)
class NetParams:
    """Parameters of a base-b (t,m,s)-net; only b=2 is constructed."""

    m: int
    s: int
    b: int = 2
    t: int | None = None

    def __post_init__(self):
        if self.b != 2:
            raise ValueError("only base b=2 nets are supported")
        if self.m < 0 or self.s < 1:
            raise ValueError("need m >= 0 and s >= 1")
        if self.t is None:
            object.__setattr__(self, "t", min(sobol_t_bound(self.s), self.m))
        if not 0 <= self.t <= self.m:
            raise ValueError("need 0 <= t <= m")

    @property
    def n_points(self):
        return 1 << self.m


@dataclass(frozen=True)
class PointSet:
    """N x s points in [0,1) with provenance and optional net metadata."""

    points: np.ndarray
    provenance: str
    params: NetParams | None = None
    ints: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.points.setflags(write=False)
        if self.ints is not None:
            self.ints.setflags(write=False)

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def s(self):
        return self.points.shape[1]


def generate_net(params: NetParams) -> PointSet:
    """Deterministic base-2 (t,m,s)-net (first 2^m Sobol points)."""
    m, s = params.m, params.s
    n = np.arange(params.n_points, dtype=np.uint64)
    X = np.zeros((params.n_points, s), dtype=np.uint64)
    if m:
        V = _direction_integers(s, m)
        for k in range(m):
            bit = (n >> np.uint64(k)) & np.uint64(1)
            X ^= bit[:, None] * V[None, :, k]
    pts = X.astype(np.float64) * 2.0 ** -max(m, 0) if m else np.zeros((1, s))
    return PointSet(pts, "raw-net", params, X)


def dump_points_csv(ps: PointSet, path):
    """Write one point per row at full double precision."""
    with open(path, "w") as fh:
        for row in ps.points:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# scramble trees
# ---------------------------------------------------------------------------

INF = math.inf


@dataclass(frozen=True)
class ScrambleTree:
    """Nested-permutation tree for one scramble, stored as digit segments.

    ``segments`` is a tuple of (level_end, seed64): node bits for digit
    levels in (prev_end, level_end] derive from that seed. The last
    segment always has level_end = inf. A child tree created at depth L
    keeps the parent's segments up to L and appends a fresh seed, which
    is what correlates a pair of scrambles.
    """

    segments: tuple

    @classmethod
    def fresh(cls, seed) -> "ScrambleTree":
        return cls(((INF, fold_seed(seed)),))

    def child(self, depth, fresh_seed) -> "ScrambleTree":
        """Tree sharing node bits with self for digit levels 1..depth."""
        if depth == INF:
            return self
        depth = int(depth)
        if depth < 0:
            raise ValueError("correlation depth must be >= 0")
        if depth == 0:
            return ScrambleTree.fresh(fresh_seed)
        kept = []
        for end, seed in self.segments:
            if end >= depth:
                kept.append((depth, seed))
                break
            kept.append((end, seed))
        kept.append((INF, fold_seed(fresh_seed)))
        return ScrambleTree(tuple(kept))

    def substream(self, key) -> "ScrambleTree":
        """Independent per-observation tree that preserves sharing depth."""
        return ScrambleTree(tuple(
            (end, fold_seed(seed, key)) for end, seed in self.segments))


def _packed_bits(seeds, s, n_bits):
    """n_bits flip bits per (stream, dim), hashed 64 per word.

    Byte order of the uint64 view is machine-dependent; outputs are
    reproducible within a platform, which is the contract the seeds carry.
    """
    words = max(1, (n_bits + 63) // 64)
    dims = np.arange(s, dtype=np.uint64) * _DIM_SALT
    idx = np.arange(words, dtype=np.uint64) * _NODE_SALT
    base = _splitmix64(seeds[:, None, None] ^ dims[None, :, None])
    h = _splitmix64(base ^ idx[None, None, :])
    by = h.view(np.uint8).reshape(*h.shape[:-1], words * 8)
    bits = np.unpackbits(by, axis=-1, bitorder="little")
    return bits[..., :n_bits]


def _jitter_unit(seeds, s, n_values, dtype=np.float64):
    """Uniform [0,1) tail per (stream, dim, input value).

    The generation path depends only on the net shape (s, n_values) and
    dtype, so every materialization of a given configuration is
    reproducible: small per-tree workloads hash directly, large ones
    stream Philox.
    """
    if s * n_values <= 1024:
        dims = np.arange(s, dtype=np.uint64) * _DIM_SALT
        xg = np.arange(n_values, dtype=np.uint64) * _NODE_SALT
        base = _splitmix64(seeds[:, None, None]
                           ^ dims[None, :, None] ^ _JITTER_SALT)
        h = _splitmix64(base ^ xg[None, None, :])
        if dtype == np.float32:
            return (h >> np.uint64(40)).astype(np.float32) * np.float32(
                2.0 ** -24)
        return (h >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
    out = np.empty((len(seeds), s, n_values), dtype=dtype)
    done = {}
    for i, sd in enumerate(seeds):
        key = int(sd)
        if key in done:
            out[i] = out[done[key]]
            continue
        bg = np.random.Philox(key=key ^ int(_JITTER_SALT), counter=0)
        out[i] = np.random.Generator(bg).random((s, n_values), dtype=dtype)
        done[key] = i
    return out


def _seg_index(level_ends, level):
    """Index of the segment whose seeds govern a digit level."""
    for i, end in enumerate(level_ends):
        if level <= end:
            return i
    return len(level_ends) - 1


def scramble_stream(net: PointSet, level_ends, seeds,
                    dtype=np.float64) -> np.ndarray:
    """Owen-scramble one net under B trees at once -> (B, N, s).

    ``level_ends`` is the shared segment structure (ascending, last inf)
    and ``seeds`` a (B, n_segments) uint64 matrix of per-tree segment
    seeds; trees sharing a seed share the node bits of that segment's
    digit levels laterally, which is what correlates scrambles.
    float32 output is a throughput option for estimators; exact digit
    guarantees (the b^-L pair distance) hold for the float64 path.
    """
    if net.params is None or net.ints is None:
        raise ValueError("scrambling requires a raw net with digit metadata")
    if net.params.b != 2:
        raise ValueError("base mismatch: scrambler is base 2")
    m, s = net.params.m, net.params.s
    seeds = np.atleast_2d(np.asarray(seeds, dtype=np.uint64))

    # Prefix-doubling build of the scrambled-digit table: T_k maps a
    # k-digit input prefix to its scrambled prefix. Node bits for level k
    # are keyed by (segment seed, level, dim, prefix), hashed 64 per word.
    word = np.uint16 if m <= 16 else np.uint32
    table = np.zeros((seeds.shape[0], s, 1), dtype=word)
    for k in range(1, m + 1):
        sk = seeds[:, _seg_index(level_ends, k)]
        level_key = _splitmix64(sk ^ np.uint64(fold_seed(int(_NODE_SALT), k)))
        flip = _packed_bits(level_key, s, 1 << (k - 1)).astype(word)
        digit = np.arange(1 << k, dtype=word) & word(1)
        t = np.repeat(table, 2, axis=2)
        np.left_shift(t, word(1), out=t)
        f = np.repeat(flip, 2, axis=2)
        np.bitwise_xor(f, digit[None, None, :], out=f)
        np.bitwise_or(t, f, out=t)
        table = t

    # digits beyond m: per-point uniform tail, spliced at segment bounds
    value = table.astype(dtype)
    scale = 1.0
    prev = m
    max_digits = 24 if dtype == np.float32 else MAX_DIGITS
    for end in level_ends:
        hi = max_digits if end == INF else min(int(end), max_digits)
        if hi <= prev:
            continue
        sk = seeds[:, _seg_index(level_ends, prev + 1)]
        u = _jitter_unit(sk, s, 1 << m, dtype)
        if hi < max_digits:
            nbits = hi - prev
            u = np.floor(u * (1 << nbits)) * dtype(2.0 ** -nbits)
        value += u * dtype(scale)
        scale *= 2.0 ** -(hi - prev)
        prev = hi
        if prev >= max_digits:
            break

    flat_idx = (np.arange(s)[:, None] * (1 << m)
                + net.ints.T.astype(np.int64)).ravel()
    out = value.reshape(value.shape[0], -1)[:, flat_idx] * dtype(2.0 ** -m)
    return out.reshape(value.shape[0], s, -1).transpose(0, 2, 1)


def scramble_many(net: PointSet, trees) -> np.ndarray:
    """Owen-scramble one net under a list of same-structure trees."""
    ends = tuple(end for end, _ in trees[0].segments)
    seeds = np.array([[sd for _, sd in tr.segments] for tr in trees],
                     dtype=np.uint64)
    return scramble_stream(net, ends, seeds)


def owen_scramble(net: PointSet, tree: ScrambleTree) -> PointSet:
    """Scramble a raw net; preserves the (t,m,s)-net property."""
    pts = scramble_many(net, [tree])[0]
    return PointSet(pts, f"scrambled({tree.segments[-1][1]})", net.params)


def correlated_scramble(net: PointSet, reference: ScrambleTree, depth,
                        fresh_seed) -> tuple[PointSet, ScrambleTree]:
    """Scramble under a tree sharing levels 1..depth with ``reference``.

    depth = 0 gives an independent scramble, depth = inf reproduces the
    reference scramble exactly.
    """
    tree = reference.child(depth, fresh_seed)
    return owen_scramble(net, tree), tree


# ---------------------------------------------------------------------------
# pseudo-random fallback
# ---------------------------------------------------------------------------

def uniform_block(seed, stream, shape, dtype=np.float64) -> np.ndarray:
    """Philox uniforms; disjoint counter ranges per (seed, stream)."""
    bg = np.random.Philox(key=int(seed) & ((1 << 128) - 1),
                          counter=(int(stream) & _MASK64) << 128)
    return np.random.Generator(bg).random(shape, dtype=dtype)


def normal_block(seed, stream, shape) -> np.ndarray:
    """Philox standard normals on a disjoint counter range."""
    bg = np.random.Philox(key=int(seed) & ((1 << 128) - 1),
                          counter=(int(stream) & _MASK64) << 128)
    return np.random.Generator(bg).standard_normal(shape)


def pseudo_uniform(n, s, seed, stream=0) -> PointSet:
    """i.i.d. uniforms, reproducible from (seed, stream) alone."""
    return PointSet(uniform_block(seed, stream, (n, s)), f"pseudo({seed})")


# ---------------------------------------------------------------------------
# net-property verification
# ---------------------------------------------------------------------------

def _compositions(total, parts):
    """All orderings of `total` into `parts` nonnegative integers."""
    for cuts in combinations(range(total + parts - 1), parts - 1):
        comp = []
        last = -1
        for c in cuts:
            comp.append(c - last - 1)
            last = c
        comp.append(total + parts - 2 - last)
        yield comp


def satisfies_net_property(points, m, t, b=2) -> bool:
    """Exhaustive elementary-interval count for a base-b point set."""
    n, s = points.shape
    if n != b ** m:
        return False
    if t == m:
        return True
    for d in _compositions(m - t, s):
        idx = np.zeros(n, dtype=np.int64)
        stride = 1
        for j in range(s):
            cells = b ** d[j]
            idx += np.minimum((points[:, j] * cells).astype(np.int64),
                              cells - 1) * stride
            stride *= cells
        counts = np.bincount(idx, minlength=stride)
        if not np.all(counts == b ** t):
            return False
    return True


def exact_t_value(points, m, b=2) -> int:
    """Smallest t for which the elementary-interval property holds."""
    for t in range(m + 1):
        if satisfies_net_property(points, m, t, b):
            return t
    raise AssertionError("a b^m point set is always a (m,m,s)-net")
