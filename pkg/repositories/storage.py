import os
import tempfile
from contextlib import contextmanager


@contextmanager
def atomic_write(path: str, mode: str = 'wb', encoding: str | None = None):
    '''
    Yield a file handle whose contents only show up at path once the block
    finishes without raising. Writes go to a temp file in the same directory
    and are moved over path with os.replace.

    Parameters:
        path (str): final location
        mode (str): 'wb' or 'w'
        encoding (str): text encoding for mode 'w', utf-8 if not given

    Example:
        >>> with atomic_write('out.csv', 'w') as f:
        ...     f.write('index,sigma\\n')
    '''
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix='.' + os.path.basename(path) + '.', suffix='.tmp')
    if 'b' not in mode:
        encoding = encoding or 'utf-8'
    try:
        with os.fdopen(fd, mode, encoding=encoding, newline='' if 'b' not in mode else None) as f:
            yield f
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def write_bytes(path: str, data: bytes):
    with atomic_write(path, 'wb') as f:
        f.write(data)


def write_text(path: str, text: str):
    with atomic_write(path, 'w') as f:
        f.write(text)
