"""符号付き距離関数としてのレベルセットを扱うモジュール.

流体内部を負とする。平滑化ヘヴィサイド関数による体積計算、
高速マーチング法による再距離化、法線と曲率、連結成分、
ナローバンドの選択、連結成分ごとの目標体積の更新を提供する。
"""

import heapq
import logging
from dataclasses import dataclass, replace

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from src.internal.errors import DegenerateGradientError, NoInterfaceError
from src.internal.grid import (
    CellField,
    FieldKind,
    GridDesc,
    lattice_bilinear,
)

_logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
IntArray = NDArray[np.int64]

HEAVISIDE_SATURATION = 60.0
GRADIENT_FLOOR = 1e-8


def heaviside(phi_val: FloatArray | float, k: float) -> FloatArray | float:
    """平滑化ヘヴィサイド関数 H = 1 / (1 + exp(2kφ)).

    |2kφ| > 60 では 0 または 1 に飽和させる。
    """
    z = 2.0 * k * np.asarray(phi_val, dtype=np.float64)
    h = 1.0 / (1.0 + np.exp(np.clip(z, -HEAVISIDE_SATURATION, HEAVISIDE_SATURATION)))
    h = np.where(z > HEAVISIDE_SATURATION, 0.0, h)
    h = np.where(z < -HEAVISIDE_SATURATION, 1.0, h)
    return float(h) if h.ndim == 0 else h


def heaviside_prime(phi_val: FloatArray | float, k: float) -> FloatArray | float:
    """ヘヴィサイド関数の導関数 H' = -2k H (1 - H)."""
    z = 2.0 * k * np.asarray(phi_val, dtype=np.float64)
    h = 1.0 / (1.0 + np.exp(np.clip(z, -HEAVISIDE_SATURATION, HEAVISIDE_SATURATION)))
    hp = -2.0 * k * h * (1.0 - h)
    hp = np.where(np.abs(z) > HEAVISIDE_SATURATION, 0.0, hp)
    return float(hp) if hp.ndim == 0 else hp


def connected_components(phi: FloatArray) -> tuple[IntArray, int]:
    """φ < 0 のセルを4近傍で連結成分に分ける.

    Returns
    -------
    tuple[IntArray, int]
        セルごとの成分ラベル (流体外は -1) と成分数.

    """
    labels, count = ndimage.label(np.asarray(phi) < 0.0)
    return labels.astype(np.int64) - 1, int(count)


def _shifted(a: NDArray, axis: int, step: int, fill: float | int) -> NDArray:
    """隣接セルの値を並べた配列. 格子外は fill."""
    out = np.full_like(a, fill)
    src = [slice(None), slice(None)]
    dst = [slice(None), slice(None)]
    if step > 0:
        src[axis], dst[axis] = slice(None, -1), slice(1, None)
    else:
        src[axis], dst[axis] = slice(1, None), slice(None, -1)
    out[tuple(dst)] = a[tuple(src)]
    return out


def attribute_cells(components: IntArray, phi: FloatArray) -> IntArray:
    """φ >= 0 のセルを隣接する流体成分に割り当てる. 流体が無ければ全て -1.

    割り当て済みの4近傍のうち |φ| が最小のセルの成分を選び、
    同値の場合は成分番号の小さい方を選ぶ。
    流体に接しないセルは割り当て済みのセルから1層ずつ同じ規則で広げる。
    """
    fluid = components >= 0
    if not np.any(fluid):
        return np.full(components.shape, -1, dtype=np.int64)
    none = np.iinfo(np.int64).max
    magnitude = np.abs(np.asarray(phi, dtype=np.float64))
    out = components.astype(np.int64)
    assigned = fluid.copy()
    key = np.where(assigned, magnitude, np.inf)
    while not np.all(assigned):
        best_key = np.full(key.shape, np.inf)
        best_label = np.full(out.shape, none, dtype=np.int64)
        labels = np.where(assigned, out, none)
        for axis in (0, 1):
            for step in (1, -1):
                nb_key = _shifted(key, axis, step, np.inf)
                nb_label = _shifted(labels, axis, step, none)
                better = (nb_key < best_key) | (
                    (nb_key == best_key) & (nb_label < best_label)
                )
                best_key = np.where(better, nb_key, best_key)
                best_label = np.where(better, nb_label, best_label)
        front = ~assigned & np.isfinite(best_key)
        out[front] = best_label[front]
        key[front] = magnitude[front]
        assigned |= front
    return out


@dataclass
class LevelSet:
    """レベルセットと連結成分の情報.

    Parameters
    ----------
    phi : CellField
        セル中心の符号付き距離 [m]. 流体内部が負.

    band_width : float
        表面張力とヘヴィサイド関数に使うナローバンド幅 ε [m].

    sharpness : float
        ヘヴィサイド関数の鋭さ k = L / ε [1/m].

    components : IntArray
        φ < 0 のセルの成分ラベル. それ以外は -1.

    attribution : IntArray
        体積計算で各セルが寄与する成分. 流体が無い場合は -1.

    targets : FloatArray
        成分ごとの目標体積 V_0 [m^2].

    """

    phi: CellField
    band_width: float
    sharpness: float
    components: IntArray
    attribution: IntArray
    targets: FloatArray

    def __post_init__(self: "LevelSet") -> None:
        """目標体積の数と値を検証する."""
        n = self.num_components
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.targets.shape != (n,):
            message = f"Expected {n} component targets, got {self.targets.shape}."
            raise ValueError(message)
        if not np.all(np.isfinite(self.targets)) or np.any(self.targets <= 0.0):
            message = "Component target volumes must be finite and positive."
            raise ValueError(message)

    @property
    def desc(self: "LevelSet") -> GridDesc:
        """グリッド形状."""
        return self.phi.desc

    @property
    def num_components(self: "LevelSet") -> int:
        """連結成分の数."""
        return int(self.components.max() + 1) if self.components.size else 0

    @staticmethod
    def from_phi(
        phi: CellField,
        targets: FloatArray | None = None,
        band_width: float | None = None,
    ) -> "LevelSet":
        """φ から成分情報を計算してレベルセットを作成する.

        targets を省略した場合は現在の離散体積を目標体積とする。
        """
        eps = 3.0 * phi.desc.dx if band_width is None else band_width
        k = phi.desc.domain_length / eps
        components, count = connected_components(phi.data)
        attribution = attribute_cells(components, phi.data)
        if targets is None:
            volumes = _component_volumes(phi, k, attribution, count)
            targets = volumes
        return LevelSet(
            phi=phi,
            band_width=eps,
            sharpness=k,
            components=components,
            attribution=attribution,
            targets=np.asarray(targets, dtype=np.float64),
        )

    def with_phi(self: "LevelSet", data: FloatArray) -> "LevelSet":
        """φ を差し替え、トポロジー変化に応じて目標体積を引き継ぐ."""
        phi = CellField(desc=self.desc, data=data)
        components, count = connected_components(phi.data)
        attribution = attribute_cells(components, phi.data)
        volumes = _component_volumes(phi, self.sharpness, attribution, count)
        targets = update_component_targets(
            components, volumes, self.region_labels(), self.targets
        )
        return replace(
            self,
            phi=phi,
            components=components,
            attribution=attribution,
            targets=targets,
        )

    def with_targets(self: "LevelSet", targets: FloatArray) -> "LevelSet":
        """目標体積のみを差し替える."""
        return replace(self, targets=np.asarray(targets, dtype=np.float64))

    def region_labels(self: "LevelSet") -> IntArray:
        """φ < ε のセルに成分ラベルを付けた配列. 対応付けの判定に使う."""
        return np.where(self.phi.data < self.band_width, self.attribution, -1)

    def heaviside_field(self: "LevelSet") -> FloatArray:
        """セルごとの H(φ)."""
        return np.asarray(heaviside(self.phi.data, self.sharpness))


def _component_volumes(
    phi: CellField, k: float, attribution: IntArray, count: int
) -> FloatArray:
    """成分ごとの Σ H(φ) V_c."""
    if count == 0:
        return np.zeros(0)
    h = np.asarray(heaviside(phi.data, k)) * phi.desc.cell_volume
    return np.bincount(attribution.ravel(), weights=h.ravel(), minlength=count)


def discrete_volume(ls: LevelSet) -> FloatArray:
    """成分ごとの離散体積 Σ H(φ) V_c を返す."""
    return _component_volumes(
        ls.phi, ls.sharpness, ls.attribution, ls.num_components
    )


def total_volume(ls: LevelSet) -> float:
    """全セルの Σ H(φ) V_c."""
    return float(np.sum(ls.heaviside_field()) * ls.desc.cell_volume)


def volume_errors(ls: LevelSet) -> FloatArray:
    """成分ごとの相対体積誤差 |V - V_0| / V_0."""
    if ls.num_components == 0:
        return np.zeros(0)
    return np.abs(discrete_volume(ls) - ls.targets) / ls.targets


def _interface_distances(phi: FloatArray, dx: float) -> FloatArray:
    """符号が変わる辺を持つセルに、線形補間した界面までの距離を与える.

    界面に接しないセルは inf.
    """
    neg = phi < 0.0
    inv_sq = np.zeros_like(phi)
    touched = np.zeros(phi.shape, dtype=bool)
    zero_hit = np.zeros(phi.shape, dtype=bool)
    for axis in (0, 1):
        best = np.full(phi.shape, np.inf)
        for shift in (1, -1):
            nb = np.roll(phi, -shift, axis=axis)
            valid = np.ones(phi.shape, dtype=bool)
            edge = [slice(None), slice(None)]
            edge[axis] = slice(-1, None) if shift == 1 else slice(0, 1)
            valid[tuple(edge)] = False
            crossing = valid & (neg != (nb < 0.0))
            denom = np.where(crossing, phi - nb, 1.0)
            theta = np.where(crossing, phi / denom, np.inf)
            best = np.minimum(best, theta * dx)
        has = np.isfinite(best)
        touched |= has
        zero_hit |= has & (best <= 0.0)
        safe = np.where(has & (best > 0.0), best, 1.0)
        inv_sq += np.where(has & (best > 0.0), 1.0 / safe**2, 0.0)
    out = np.full(phi.shape, np.inf)
    pos = touched & ~zero_hit
    out[pos] = 1.0 / np.sqrt(inv_sq[pos])
    out[zero_hit] = 0.0
    return out


def _eikonal_update(a: float, b: float, dx: float) -> float:
    """4近傍の1次風上差分による Eikonal 方程式の局所解."""
    if not np.isfinite(a):
        return b + dx
    if not np.isfinite(b):
        return a + dx
    if abs(a - b) >= dx:
        return min(a, b) + dx
    return 0.5 * (a + b + np.sqrt(2.0 * dx * dx - (a - b) ** 2))


def _fast_march(dist: FloatArray, frozen: NDArray[np.bool_], dx: float) -> FloatArray:
    """凍結セルを起点に高速マーチング法で距離を伝播する."""
    nx, ny = dist.shape
    heap: list[tuple[float, int, int]] = []

    def neighbor_min(i: int, j: int, axis: int) -> float:
        best = np.inf
        for s in (-1, 1):
            ii, jj = (i + s, j) if axis == 0 else (i, j + s)
            if 0 <= ii < nx and 0 <= jj < ny and frozen[ii, jj]:
                best = min(best, dist[ii, jj])
        return best

    def push_neighbors(i: int, j: int) -> None:
        for ii, jj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
            if 0 <= ii < nx and 0 <= jj < ny and not frozen[ii, jj]:
                cand = _eikonal_update(
                    neighbor_min(ii, jj, 0), neighbor_min(ii, jj, 1), dx
                )
                if cand < dist[ii, jj]:
                    dist[ii, jj] = cand
                    heapq.heappush(heap, (cand, ii, jj))

    for i, j in zip(*np.nonzero(frozen), strict=True):
        push_neighbors(int(i), int(j))
    while heap:
        val, i, j = heapq.heappop(heap)
        if frozen[i, j] or val > dist[i, j]:
            continue
        frozen[i, j] = True
        push_neighbors(i, j)
    return dist


def redistance(ls: LevelSet) -> LevelSet:
    """高速マーチング法で φ を符号付き距離関数に再初期化する.

    Raises
    ------
    NoInterfaceError
        φ に符号の変化が存在しない場合.

    Notes
    -----
    界面に接するセルは辺上の線形補間で求めた交点距離から初期化し、
    それ以外のセルは4近傍の1次風上 Eikonal 更新で伝播する。
    各セルの符号は保存する。

    """
    phi = ls.phi.data
    neg = phi < 0.0
    if not np.any(neg) or np.all(neg):
        message = "Level set has no zero isocontour."
        raise NoInterfaceError(message)
    dx = ls.desc.dx
    dist = _interface_distances(phi, dx)
    frozen = np.isfinite(dist)
    dist = _fast_march(dist, frozen.copy(), dx)
    out = np.where(neg, -dist, dist)
    _logger.debug("Redistanced %d interface cells.", int(np.count_nonzero(frozen)))
    return replace(ls, phi=CellField(desc=ls.desc, data=out))


def _derivatives(
    phi: FloatArray, dx: float
) -> tuple[FloatArray, FloatArray, FloatArray, FloatArray, FloatArray]:
    """中心差分による1階・2階微分 (φx, φy, φxx, φyy, φxy)."""
    px, py = np.gradient(phi, dx)
    pxx = np.gradient(px, dx, axis=0)
    pyy = np.gradient(py, dx, axis=1)
    pxy = np.gradient(px, dx, axis=1)
    return px, py, pxx, pyy, pxy


def curvature_field(phi: CellField) -> FloatArray:
    """セルごとの曲率 κ = ∇·(∇φ/|∇φ|). 勾配が退化したセルは0とする."""
    dx = phi.desc.dx
    px, py, pxx, pyy, pxy = _derivatives(phi.data, dx)
    g = np.hypot(px, py)
    ok = g >= GRADIENT_FLOOR
    gs = np.where(ok, g, 1.0)
    kappa = (pxx * py**2 - 2.0 * px * py * pxy + pyy * px**2) / gs**3
    return np.clip(np.where(ok, kappa, 0.0), -1.0 / dx, 1.0 / dx)


def normal_field(phi: CellField) -> tuple[FloatArray, FloatArray]:
    """セルごとの単位法線 ∇φ/|∇φ|. 勾配が退化したセルは0ベクトルとする."""
    px, py = np.gradient(phi.data, phi.desc.dx)
    g = np.hypot(px, py)
    ok = g >= GRADIENT_FLOOR
    gs = np.where(ok, g, 1.0)
    return np.where(ok, px / gs, 0.0), np.where(ok, py / gs, 0.0)


def normal_and_curvature(ls: LevelSet, x: FloatArray) -> tuple[FloatArray, float]:
    """任意位置での単位法線と曲率を返す.

    Raises
    ------
    DegenerateGradientError
        補間した |∇φ| が 1e-8 未満の場合.

    """
    desc = ls.desc
    px, py = np.gradient(ls.phi.data, desc.dx)
    coords = desc.to_lattice(np.atleast_2d(x), FieldKind.CELL)
    gx = float(lattice_bilinear(px, coords)[0])
    gy = float(lattice_bilinear(py, coords)[0])
    g = float(np.hypot(gx, gy))
    if g < GRADIENT_FLOOR:
        message = f"Level-set gradient {g:.3e} is too small to define a normal."
        raise DegenerateGradientError(message)
    kappa = float(lattice_bilinear(curvature_field(ls.phi), coords)[0])
    return np.array([gx / g, gy / g]), kappa


@dataclass(frozen=True)
class NarrowbandSet:
    """最適化の未知数となるナローバンドのセル集合.

    Parameters
    ----------
    cells : IntArray
        昇順の平坦化セルインデックス.

    index_of : IntArray
        全セルから未知数番号への写像. バンド外は -1.

    width : float
        実際に用いたバンド幅 [m].

    no_fluid : bool
        流体セルが存在しない場合に True.

    """

    cells: IntArray
    index_of: IntArray
    width: float
    no_fluid: bool

    @property
    def size(self: "NarrowbandSet") -> int:
        """未知数の数."""
        return int(self.cells.size)


def narrowband_width(max_speed: float, dt: float, dx: float) -> float:
    """ナローバンド幅 ε = max(3 max|u| dt, 3 dx)."""
    return max(3.0 * max_speed * dt, 3.0 * dx)


def select_narrowband(ls_star: LevelSet, eps: float) -> NarrowbandSet:
    """|φ⋆| < ε のセルをナローバンドとして選ぶ. ε は 3dx を下限とする."""
    desc = ls_star.desc
    phi = ls_star.phi.data
    width = max(eps, 3.0 * desc.dx)
    index_of = np.full(desc.num_cells, -1, dtype=np.int64)
    if not np.any(phi < 0.0):
        return NarrowbandSet(
            cells=np.zeros(0, dtype=np.int64),
            index_of=index_of,
            width=width,
            no_fluid=True,
        )
    mask = np.abs(phi) < width
    if not np.any(mask):
        mask = np.isfinite(_interface_distances(phi, desc.dx))
        _logger.warning("Empty narrowband; falling back to interface cells.")
    cells = np.flatnonzero(mask.ravel()).astype(np.int64)
    index_of[cells] = np.arange(cells.size)
    return NarrowbandSet(cells=cells, index_of=index_of, width=width, no_fluid=False)


def update_component_targets(
    components: IntArray,
    volumes: FloatArray,
    prev_labels: IntArray,
    prev_targets: FloatArray,
) -> FloatArray:
    """トポロジー変化に合わせて成分ごとの目標体積を引き継ぐ.

    Parameters
    ----------
    components : IntArray
        現在の成分ラベル (流体外は -1).

    volumes : FloatArray
        現在の成分ごとの離散体積.

    prev_labels : IntArray
        前回の成分ラベル. 対応付けのための重なり判定に使う.

    prev_targets : FloatArray
        前回の成分ごとの目標体積.

    Returns
    -------
    FloatArray
        現在の成分ごとの目標体積.

    Notes
    -----
    重なりで結ばれた新旧成分を1つのグループとし、
    グループ内の旧目標体積の和を新成分の現在体積に比例して分配する。
    旧成分と重ならない新成分は現在体積を目標とし、
    新成分と重ならない旧成分は消滅したものとして捨てる。

    """
    n_new = len(volumes)
    n_old = len(prev_targets)
    parent = list(range(n_new + n_old))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    overlap = (components >= 0) & (prev_labels >= 0)
    pairs = np.unique(
        np.stack([components[overlap], prev_labels[overlap]], axis=-1), axis=0
    )
    for new_c, old_c in pairs:
        ra, rb = find(int(new_c)), find(n_new + int(old_c))
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    targets = np.asarray(volumes, dtype=np.float64).copy()
    groups: dict[int, tuple[list[int], list[int]]] = {}
    for c in range(n_new):
        groups.setdefault(find(c), ([], []))[0].append(c)
    for c in range(n_old):
        groups.setdefault(find(n_new + c), ([], []))[1].append(c)
    for new_ids, old_ids in groups.values():
        if not new_ids:
            _logger.info("Fluid component(s) %s vanished.", old_ids)
            continue
        if not old_ids:
            continue
        total = float(np.sum(prev_targets[old_ids]))
        vols = targets[new_ids]
        vsum = float(vols.sum())
        share = vols / vsum if vsum > 0.0 else np.full(len(vols), 1.0 / len(vols))
        targets[new_ids] = total * share
        if len(new_ids) != 1 or len(old_ids) != 1:
            _logger.info(
                "Topology change: components %s -> %s, target %.6e.",
                old_ids,
                new_ids,
                total,
            )
    return targets


def sdf_circle(
    desc: GridDesc,
    center: tuple[float, float],
    radius: float,
    kind: FieldKind = FieldKind.CELL,
) -> FloatArray:
    """円形液滴の符号付き距離 (内部が負). kind の位置で評価する."""
    xs, ys = desc.positions(kind)
    return np.hypot(xs - center[0], ys - center[1]) - radius


def sdf_box(
    desc: GridDesc,
    lower: tuple[float, float],
    upper: tuple[float, float],
    kind: FieldKind = FieldKind.CELL,
) -> FloatArray:
    """軸平行な矩形プールの符号付き距離 (内部が負)."""
    xs, ys = desc.positions(kind)
    cx, cy = 0.5 * (lower[0] + upper[0]), 0.5 * (lower[1] + upper[1])
    hx, hy = 0.5 * (upper[0] - lower[0]), 0.5 * (upper[1] - lower[1])
    qx = np.abs(xs - cx) - hx
    qy = np.abs(ys - cy) - hy
    outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
    inside = np.minimum(np.maximum(qx, qy), 0.0)
    return outside + inside
