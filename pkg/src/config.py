"""
进程级配置：从环境变量（以及项目根目录的 .env）读取。

Experiment parameters themselves live in JSON config files validated by
``src.data_models.ExperimentConfig``; this module only holds knobs that belong
to the process (output location, concurrency, tracing, log verbosity).
"""
import logging
import os
from pathlib import Path

logger = logging.getLogger(__name__)


class Settings:
    def __init__(self):
        # 输出目录：cli 的 --out 默认值
        self.OUTPUT_DIR = Path(os.environ.get("MASTERPRINT_OUTPUT_DIR", "runs"))

        self.DEBUG = os.environ.get("DEBUG") == "True"
        self.JOBS = self._get_int_env("MASTERPRINT_JOBS", 1, minimum=1)
        self.TRACE = os.environ.get("MASTERPRINT_TRACE", "").lower() in ("1", "true", "yes")
        self.LOG_EVERY = self._get_int_env("MASTERPRINT_LOG_EVERY", 100, minimum=1)

        # 慢速验收测试开关（只被 tests/ 读取）
        self.RUN_SLOW = os.environ.get("MASTERPRINT_RUN_SLOW") == "1"

    @property
    def default_config_path(self) -> Path:
        """Config shipped with the package, used when --config is not given."""
        return Path(__file__).parent / "data" / "default_config.json"

    def _get_int_env(self, key: str, default: int, minimum: int = 0) -> int:
        """从环境变量读取整数；格式错误时给出警告并回退到默认值。"""
        raw = os.environ.get(key)
        if not raw:
            return default
        try:
            value = int(raw)
        except (ValueError, TypeError):
            logger.warning(f"{key}={raw!r} is not a valid integer. Using default {default}.")
            return default
        if value < minimum:
            logger.warning(f"{key}={value} is below {minimum}. Using default {default}.")
            return default
        return value


# ---------------------------------------------------------------------
# Settings 单例，整个进程共享一个配置对象。
# ---------------------------------------------------------------------
settings = Settings()
