"""
工具模块：日志设置、随机数流拆分、原子写文件
"""
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Union

import numpy as np

# 随机数流编号。spawn_key 的第一个元素固定为流的用途，保证不同用途的流互不重叠。
STREAM_CLUSTERS = 0
STREAM_GALLERY = 1
STREAM_TRAIN = 2
STREAM_TEST = 3
STREAM_GENERATOR = 4
STREAM_CALIBRATION = 5
STREAM_SEARCH = 6
STREAM_TRIAL = 7


def setup_logger(name: str = "masterprint", level: int = logging.INFO) -> logging.Logger:
    """
    设置并返回标准 logging 对象（输出到 stderr，数据只写文件）

    Args:
        name: logger 名称
        level: 日志级别，默认为 INFO

    Returns:
        配置好的 logging.Logger 实例
    """
    logger = logging.getLogger(name)
    logger.setLevel(level)

    # 避免重复添加 handler
    if logger.handlers:
        for handler in logger.handlers:
            handler.setLevel(level)
        return logger

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(level)
    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    return logger


def spawn_rng(seed: int, *keys: int) -> np.random.Generator:
    """
    Portable substream of ``seed`` addressed by ``keys``.

    Every stream is ``PCG64(SeedSequence(seed, spawn_key=keys))``, so the draw for
    (seed, keys) never depends on how many other streams were consumed before it.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(keys))))


def derive_seed(seed: int, *keys: int) -> int:
    """Child integer seed for (seed, keys); used for trial and per-print seeds."""
    state = np.random.SeedSequence(seed, spawn_key=tuple(keys)).generate_state(1, dtype=np.uint32)
    return int(state[0])


def normalize(vectors: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Scale the last axis to unit Euclidean norm. Rows with norm <= eps are left as-is."""
    vectors = np.asarray(vectors, dtype=float)
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    safe = np.where(norms > eps, norms, 1.0)
    return vectors / safe


def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    """
    写入文本文件：先写同目录临时文件，再 os.replace，避免读到半截文件。

    :param path: 目标路径，父目录不存在时自动创建
    :param text: 文件内容
    :return: 写入的路径
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise
    return path
