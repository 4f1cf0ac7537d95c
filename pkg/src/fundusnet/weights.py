"""Pretrained backbone registry with a checksum-verified local cache.

Cache layout::

    <cache>/<backbone_id>/<checksum>.bin    raw weight file as published
    <cache>/<backbone_id>/<checksum>.json   source URL and fetch time
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import logging
import os
import shutil
import tempfile
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import torch

from .errors import FetchError, IntegrityError, RegistryError

logger = logging.getLogger(__name__)

CACHE_ENV = "FUNDUSNET_CACHE"


@dataclass(frozen=True)
class WeightSource:
    url: str
    # Hex SHA-256 of the file; a leading prefix is accepted, as torch hub does.
    checksum: str
    architecture: str


REGISTRY: dict[str, WeightSource] = {
    "efficientnet_b0": WeightSource(
        url="https://download.pytorch.org/models/efficientnet_b0_rwightman-7f5810bc.pth",
        checksum="7f5810bc",
        architecture="efficientnet_b0",
    ),
}


@dataclass(frozen=True)
class WeightBundle:
    backbone_id: str
    path: Path
    checksum: str
    url: str

    def state_dict(self) -> dict[str, torch.Tensor]:
        return torch.load(self.path, map_location="cpu", weights_only=True)


def default_cache_dir() -> Path:
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    base = os.environ.get("XDG_CACHE_HOME") or Path.home() / ".cache"
    return Path(base) / "fundusnet"


def sha256_file(path: str | Path, chunk=1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while block := fh.read(chunk):
            h.update(block)
    return h.hexdigest()


def _verify(path: Path, checksum: str) -> bool:
    return sha256_file(path).startswith(checksum.lower())


def _open_url(url: str, timeout: float = 60.0):
    return urllib.request.urlopen(url, timeout=timeout)


def _download(url: str, dest: Path) -> None:
    dest.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dest.parent, suffix=".part")
    try:
        with os.fdopen(fd, "wb") as out:
            try:
                with _open_url(url) as resp:
                    shutil.copyfileobj(resp, out)
            except (urllib.error.URLError, OSError, ValueError) as exc:
                raise FetchError(f"cannot download {url}: {exc}") from exc
        os.replace(tmp, dest)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def fetch_pretrained(backbone_id: str = "efficientnet_b0",
                     cache_dir: str | Path | None = None) -> WeightBundle:
    """Return a verified weight bundle, downloading it on a cache miss.

    A cached file that fails verification is evicted and downloaded once
    more; a second failure raises :class:`IntegrityError`.
    """
    try:
        source = REGISTRY[backbone_id]
    except KeyError:
        raise RegistryError(
            f"unknown backbone {backbone_id!r}; registered: {sorted(REGISTRY)}") from None

    folder = Path(cache_dir if cache_dir is not None else default_cache_dir()) / backbone_id
    blob = folder / f"{source.checksum}.bin"
    sidecar = folder / f"{source.checksum}.json"
    bundle = WeightBundle(backbone_id, blob, source.checksum, source.url)

    if blob.exists():
        if _verify(blob, source.checksum):
            return bundle
        logger.warning("cached weights %s failed checksum; re-downloading", blob)
        blob.unlink()
        sidecar.unlink(missing_ok=True)

    logger.info("downloading %s weights from %s", backbone_id, source.url)
    _download(source.url, blob)
    if not _verify(blob, source.checksum):
        blob.unlink()
        raise IntegrityError(
            f"checksum mismatch for {backbone_id} downloaded from {source.url}")
    sidecar.write_text(json.dumps({
        "backbone_id": backbone_id,
        "url": source.url,
        "sha256": sha256_file(blob),
        "fetched_at": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
    }, indent=2) + "\n")
    return bundle
