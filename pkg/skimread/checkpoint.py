# SPDX-FileCopyrightText: 2015 Eric Larson, 2023 Frost Ming
#
# SPDX-License-Identifier: Apache-2.0
from __future__ import annotations

import hashlib
import logging
import os
import typing as t

from filelock import FileLock

from skimread.errors import DataError
from skimread.serialize import Serializer

if t.TYPE_CHECKING:
    from _typeshed import StrPath
    from filelock import BaseFileLock

    from skimread.model import RamModel
    from skimread.serialize import Checkpoint

logger = logging.getLogger(__name__)


def _secure_open_write(filename: StrPath, fmode: int) -> t.IO[bytes]:
    # We only want to write to this file, so open it in write only mode
    flags = os.O_WRONLY

    # os.O_CREAT | os.O_EXCL will fail if the file already exists, so we only
    # will open *new* files.
    flags |= os.O_CREAT | os.O_EXCL

    # Do not follow symlinks planted in place of the checkpoint.
    if hasattr(os, "O_NOFOLLOW"):
        flags |= os.O_NOFOLLOW

    # On Windows we'll mark this file as binary
    if hasattr(os, "O_BINARY"):
        flags |= os.O_BINARY

    try:
        os.remove(filename)
    except OSError:
        pass

    fd = os.open(filename, flags, fmode)
    try:
        return os.fdopen(fd, "wb")

    except:
        os.close(fd)
        raise


class CheckpointFile:
    """One combined checkpoint file holding encoder, decoder and alignment."""

    def __init__(
        self,
        path: StrPath,
        filemode: int = 0o0600,
        dirmode: int = 0o0700,
        lock_class: type[BaseFileLock] | None = None,
        serializer: Serializer | None = None,
    ) -> None:
        self.path = os.fspath(path)
        self.filemode = filemode
        self.dirmode = dirmode
        self.lock_class = lock_class or FileLock
        self.serializer = serializer or Serializer()

    def write(self, model: RamModel, meta: t.Mapping[str, t.Any] | None = None) -> str:
        """Serialize ``model`` to the file and return its digest."""
        data = self.serializer.dumps(model, meta)
        directory = os.path.dirname(self.path)
        if directory:
            os.makedirs(directory, self.dirmode, exist_ok=True)
        with self.lock_class(self.path + ".lock"):
            with _secure_open_write(self.path, self.filemode) as fh:
                fh.write(data)
        digest = hashlib.sha224(data).hexdigest()
        logger.debug("Wrote checkpoint %s (%d bytes, digest %s)", self.path, len(data), digest)
        return digest

    def read(self) -> Checkpoint:
        try:
            with open(self.path, "rb") as fh:
                data = fh.read()
        except FileNotFoundError:
            raise DataError(f"checkpoint not found: {self.path}") from None
        checkpoint = self.serializer.loads(data)
        if checkpoint is None:
            raise DataError(f"unreadable checkpoint: {self.path}")
        return checkpoint

    def load_model(self) -> RamModel:
        return self.read().to_model()

    def digest(self) -> str:
        with open(self.path, "rb") as fh:
            return hashlib.sha224(fh.read()).hexdigest()
