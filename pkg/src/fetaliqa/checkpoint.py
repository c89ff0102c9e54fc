"""Byte-stable checkpoint files.

A checkpoint holds the student and teacher parameter dicts, the Adam moment
estimates, and a small metadata record (architecture id, step counter, config
echo).  The container is an uncompressed zip whose member order, timestamps,
and serialization are all pinned, so saving the same state twice produces
byte-identical files.  That property is what lets a re-run with the same
config and seed be verified by file digest alone; np.savez would embed the
wall-clock mtime and break it.
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np

from .errors import ManifestError

FORMAT_VERSION = 1

# Zip timestamps are dates, not content; pin them to the epoch of the format.
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(
    path,
    *,
    student: dict[str, np.ndarray],
    teacher: dict[str, np.ndarray],
    adam_m: dict[str, np.ndarray],
    adam_v: dict[str, np.ndarray],
    meta: dict,
) -> None:
    meta = dict(meta)
    meta["format_version"] = FORMAT_VERSION
    members: list[tuple[str, bytes]] = [
        ("meta.json", (json.dumps(meta, sort_keys=True, indent=1) + "\n").encode())
    ]
    for group, params in (
        ("student", student),
        ("teacher", teacher),
        ("opt/m", adam_m),
        ("opt/v", adam_v),
    ):
        for name in sorted(params):
            members.append((f"{group}/{name}.npy", _npy_bytes(params[name])))
    with open(path, "wb") as fh:
        with zipfile.ZipFile(fh, "w", zipfile.ZIP_STORED) as zf:
            for name, data in members:
                _write_member(zf, name, data)


def load_checkpoint(path) -> dict:
    """Returns dict with keys student, teacher, adam_m, adam_v, meta."""
    groups: dict[str, dict[str, np.ndarray]] = {
        "student": {},
        "teacher": {},
        "opt/m": {},
        "opt/v": {},
    }
    try:
        with zipfile.ZipFile(path, "r") as zf:
            names = zf.namelist()
            if "meta.json" not in names:
                raise ManifestError(f"{path}: not a checkpoint (missing meta.json)")
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format_version") != FORMAT_VERSION:
                raise ManifestError(
                    f"{path}: unsupported checkpoint format_version "
                    f"{meta.get('format_version')!r}"
                )
            for member in names:
                if member == "meta.json":
                    continue
                group, _, rest = member.rpartition("/")
                if group not in groups or not rest.endswith(".npy"):
                    raise ManifestError(f"{path}: unexpected member {member!r}")
                arr = np.lib.format.read_array(
                    io.BytesIO(zf.read(member)), allow_pickle=False
                )
                groups[group][rest[: -len(".npy")]] = arr
    except zipfile.BadZipFile as exc:
        raise ManifestError(f"{path}: not a zip checkpoint ({exc})") from exc
    return {
        "student": groups["student"],
        "teacher": groups["teacher"],
        "adam_m": groups["opt/m"],
        "adam_v": groups["opt/v"],
        "meta": meta,
    }
