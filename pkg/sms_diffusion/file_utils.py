"""
文件工具模块，提供输入校验、原子写入和 JSON 旁路文件（sidecar）读写等辅助功能。
"""
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Union

from utils import logger, ArtifactError

PathLike = Union[str, os.PathLike]


def validate_file(file_path: PathLike, max_size_mb: float = 4096) -> Path:
    """
    校验文件是否存在且大小不超过指定MB。
    :param file_path: 文件路径
    :param max_size_mb: 最大允许大小（MB）
    :raises: ArtifactError
    """
    path = Path(file_path)
    if not path.is_file():
        raise ArtifactError(f"文件不存在: {path}")
    size_mb = path.stat().st_size / (1024 * 1024)
    if size_mb > max_size_mb:
        raise ArtifactError(f"文件过大: {size_mb:.2f}MB > {max_size_mb}MB")

    logger.debug(f"Validated file: {path} ({size_mb:.2f} MB)")
    return path


def atomic_write_bytes(file_path: PathLike, payload: bytes) -> Path:
    """
    原子写入：先写同目录临时文件，再 rename 覆盖目标。
    :param file_path: 目标路径
    :param payload: 文件内容
    :return: 目标路径
    """
    path = Path(file_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, temp_path = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as temp_file:
            temp_file.write(payload)
            temp_file.flush()
            os.fsync(temp_file.fileno())
        os.replace(temp_path, path)
    except Exception:
        if os.path.exists(temp_path):
            os.unlink(temp_path)
        raise

    logger.debug(f"Wrote {len(payload)} bytes to {path}")
    return path


def canonical_json(document: Any) -> str:
    """固定键顺序的 JSON 文本，保证相同输入得到字节一致的产物。"""
    return json.dumps(document, sort_keys=True, indent=2, allow_nan=False) + "\n"


def atomic_write_json(file_path: PathLike, document: Any) -> Path:
    return atomic_write_bytes(file_path, canonical_json(document).encode("utf-8"))


def read_json(file_path: PathLike) -> Dict[str, Any]:
    """
    读取 JSON 旁路文件。
    :param file_path: 文件路径
    :return: 解析后的字典
    """
    path = validate_file(file_path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArtifactError(f"Error reading JSON file {path}: {e}")
