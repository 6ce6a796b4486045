import os

from . import logger

_MODE = 0o666


class LockBusyError(RuntimeError):
    """Another process holds the lock of an output directory."""


if os.name == "nt":
    import msvcrt
    import time
    from errno import EACCES, EDEADLK

    _FLAG = os.O_RDWR | os.O_TRUNC | os.O_CREAT

    class FileLocker:
        """A file locker that uses msvcrt for Windows platforms."""

        __slots__ = ("file", "fd", "blocking")

        def __init__(self, file: str, blocking: bool = True) -> None:
            self.file = file
            self.fd = None
            self.blocking = blocking

        def acquire(self):
            """Acquire an exclusive lock on the file using msvcrt."""
            if self.fd is None:
                fd = os.open(self.file, _FLAG, _MODE)
                while True:
                    try:
                        msvcrt.locking(fd, msvcrt.LK_NBLCK if not self.blocking else msvcrt.LK_LOCK, 1)
                        break
                    except OSError as e:
                        if not self.blocking and e.errno in (EACCES, EDEADLK):
                            os.close(fd)
                            raise LockBusyError(f'"{self.file}" is held by another run.') from None
                        # LK_LOCK raises EDEADLK after 10 retries
                        if e.errno != EDEADLK:
                            os.close(fd)
                            raise
                    time.sleep(1)
                os.write(fd, str(os.getpid()).encode())
                self.fd = fd
                logger.debug("Lock acquired: %s", self.file)

        def release(self):
            """Release the acquired lock and close the file."""
            if self.fd is not None:
                os.lseek(self.fd, 0, os.SEEK_SET)
                msvcrt.locking(self.fd, msvcrt.LK_UNLCK, 1)
                os.close(self.fd)
                self.fd = None
                try:
                    os.unlink(self.file)
                except OSError:
                    pass

        def __enter__(self):
            self.acquire()
            return self

        def __exit__(self, *exc):
            self.release()

else:
    try:
        import fcntl

        _FLAG = os.O_RDWR | os.O_CREAT

        class FileLocker:
            """A file locker that uses fcntl for Unix-like systems. The
            holder's pid is written into the file."""

            __slots__ = ("file", "fd", "blocking")

            def __init__(self, file: str, blocking: bool = True) -> None:
                self.file = file
                self.fd = None
                self.blocking = blocking

            def acquire(self):
                """Acquire an exclusive lock on the file using fcntl."""
                if self.fd is None:
                    fd = os.open(self.file, _FLAG, _MODE)
                    flags = fcntl.LOCK_EX if self.blocking else fcntl.LOCK_EX | fcntl.LOCK_NB
                    try:
                        fcntl.flock(fd, flags)
                    except BlockingIOError:
                        os.close(fd)
                        raise LockBusyError(f'"{self.file}" is held by another run.') from None
                    except OSError:
                        os.close(fd)
                        raise
                    os.ftruncate(fd, 0)
                    os.write(fd, str(os.getpid()).encode())
                    self.fd = fd
                    logger.debug("Lock acquired: %s", self.file)

            def release(self):
                """Release the acquired lock and close the file."""
                if self.fd is not None:
                    fcntl.flock(self.fd, fcntl.LOCK_UN)
                    os.close(self.fd)
                    self.fd = None

            def __enter__(self):
                self.acquire()
                return self

            def __exit__(self, *exc):
                self.release()

    except ImportError:

        class FileLocker:
            def __init__(self, *args, **kwargs):
                self._noop = lambda *args, **kwargs: None

            def __getattr__(self, _):
                return self._noop

            def __enter__(self):
                return self

            def __exit__(self, *exc):
                pass
