"""Binary map files (little-endian); the layout is described in docs/format.md."""
from __future__ import annotations

import io
import struct

import numpy as np

from .policy import LevelSizes, QualityPolicy
from .semantics import SemanticDistribution
from .voxel_map import VoxelMap, pack_keys

MAGIC = b"MAPADAPT"
VERSION = 1
_HEADER = struct.Struct("<8sIdddIIQQ")
_VOXEL = np.dtype([("tsdf", "<f8"), ("weight", "<f8"), ("color", "<f8", (3,)), ("g", "<f8"),
                   ("wg", "<f8"), ("cause", "u1")])


class FormatError(ValueError):
    pass


def present_cells(m: VoxelMap) -> np.ndarray:
    """Mask over all cells: observed, split, labelled or carrying complexity."""
    n = m.n_cells
    mask = (m.weight[:n] > 0) | (m.child_level[:n] > 0) | (m.wg[:n] > 0)
    mask[np.fromiter(m.semantics.keys(), dtype=np.int64, count=len(m.semantics))] = True
    return mask


def _semantic_bytes(m: VoxelMap, flat) -> bytes:
    parts = []
    for f in flat:
        dist = m.semantics.get(f)
        if dist is None:
            parts.append(struct.pack("<Hd", 0, -1.0))
            continue
        n = len(dist.labels)
        parts.append(struct.pack(f"<Hd{'Hd' * n}", n, dist.p_rem,
                                 *[v for pair in zip(dist.labels, dist.probs) for v in pair]))
    return b"".join(parts)


def dumps(m: VoxelMap) -> bytes:
    out = io.BytesIO()
    sizes = m.sizes
    out.write(_HEADER.pack(MAGIC, VERSION, sizes.coarse, sizes.middle, sizes.fine, m.n_labels, m.B,
                           getattr(m, "policy_digest", None) or m.policy.digest(), m.n_blocks))
    order = np.argsort(pack_keys(m.block_index[:m.n_blocks]), kind="stable")
    local = np.arange(m.B3)
    mask = present_cells(m)
    for bid in order.tolist():
        flat = bid * m.B3 + local
        present = mask[flat]
        cells = flat[present]
        out.write(m.block_index[bid].astype("<i8").tobytes())
        out.write(np.packbits(present, bitorder="little").tobytes())
        rec = np.zeros(len(cells), dtype=_VOXEL)
        rec["tsdf"], rec["weight"], rec["g"], rec["wg"] = (m.tsdf[cells], m.weight[cells],
                                                          m.g[cells], m.wg[cells])
        rec["color"] = m.color[cells]
        rec["cause"] = m.cause[cells]
        out.write(rec.tobytes())
        out.write(m.child_level[cells].astype(np.uint8).tobytes())
        out.write(_semantic_bytes(m, cells.tolist()))
        for lvl in (1, 2):
            sel = cells[m.child_level[cells] == lvl]
            if len(sel) == 0:
                continue
            pool, slot = m.pools[lvl], m.child_slot[sel]
            arr = np.concatenate([pool.tsdf[slot][..., None], pool.weight[slot][..., None],
                                  pool.color[slot].astype(np.float64)], axis=2)
            out.write(arr.astype("<f8").tobytes())
            out.write(np.packbits(pool.observed[slot], axis=1, bitorder="little").tobytes())
    return out.getvalue()


def save_map(path, m: VoxelMap):
    with open(path, "wb") as fh:
        fh.write(dumps(m))


def loads(data: bytes, policy: QualityPolicy | None = None) -> VoxelMap:
    if len(data) < _HEADER.size or data[:8] != MAGIC:
        raise FormatError("not a map file (bad magic)")
    magic, version, c, mid, fine, n_labels, b, digest, n_blocks = _HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise FormatError(f"unsupported map version {version}")
    if policy is not None and policy.digest() != digest:
        raise FormatError("map was built with a different policy")
    m = VoxelMap(LevelSizes(c, mid, fine), n_labels, b, policy)
    if policy is None:
        m.policy_digest = digest
    pos = _HEADER.size
    nbytes_bitmap = (m.B3 + 7) // 8
    try:
        for _ in range(n_blocks):
            idx = np.frombuffer(data, "<i8", 3, pos)
            pos += 24
            present = np.unpackbits(np.frombuffer(data, np.uint8, nbytes_bitmap, pos),
                                    bitorder="little")[:m.B3].astype(bool)
            pos += nbytes_bitmap
            bid = int(m.block_ids(idx[None], allocate=True)[0])
            cells = bid * m.B3 + np.flatnonzero(present)
            n = len(cells)
            rec = np.frombuffer(data, _VOXEL, n, pos)
            pos += n * _VOXEL.itemsize
            m.tsdf[cells], m.weight[cells], m.g[cells], m.wg[cells] = (rec["tsdf"], rec["weight"],
                                                                      rec["g"], rec["wg"])
            m.color[cells] = rec["color"]
            m.cause[cells] = rec["cause"]
            levels = np.frombuffer(data, np.uint8, n, pos)
            pos += n
            if np.any(levels > 2):
                raise FormatError("bad child level")
            for f in cells.tolist():
                n_sem, p_rem = struct.unpack_from("<Hd", data, pos)
                pos += 10
                if p_rem >= 0:
                    vals = struct.unpack_from("<" + "Hd" * n_sem, data, pos)
                    pos += 10 * n_sem
                    m.set_semantics(f, SemanticDistribution(n_labels, list(vals[0::2]),
                                                            list(vals[1::2]), p_rem))
            for lvl in (1, 2):
                sel = cells[levels == lvl]
                if len(sel) == 0:
                    continue
                pool = m.pools[lvl]
                arr = np.frombuffer(data, "<f8", len(sel) * pool.n * 5, pos).reshape(len(sel), pool.n, 5)
                pos += arr.nbytes
                nb = (pool.n + 7) // 8
                bits = np.frombuffer(data, np.uint8, len(sel) * nb, pos).reshape(len(sel), nb)
                pos += bits.nbytes
                seen = np.unpackbits(bits, axis=1, bitorder="little")[:, :pool.n].astype(bool)
                for f, a, o in zip(sel.tolist(), arr, seen):
                    slot = pool.alloc(f)
                    pool.tsdf[slot], pool.weight[slot] = a[:, 0], a[:, 1]
                    pool.color[slot] = a[:, 2:]
                    pool.observed[slot] = o
                    m.child_level[f], m.child_slot[f] = lvl, slot
    except (struct.error, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"truncated or corrupt map file: {exc}") from None
    if pos != len(data):
        raise FormatError("trailing bytes after the last block")
    return m


def load_map(path, policy: QualityPolicy | None = None) -> VoxelMap:
    with open(path, "rb") as fh:
        return loads(fh.read(), policy)
