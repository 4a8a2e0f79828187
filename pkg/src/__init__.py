"""
MasterPrint 覆盖率实验框架

Dictionary-attack search heuristics (Diversity / Novelty MasterPrints) evaluated
against a simulated, FMR-calibrated verification system.
"""
import logging
import os

from dotenv import load_dotenv

__version__ = "0.3.0"

# ---------------------------------------------------------------------
# load_dotenv 在包导入时执行一次，保证 src.config 读取环境变量之前 .env 已加载。
# ---------------------------------------------------------------------
current_dir = os.path.dirname(os.path.abspath(__file__))
project_root = os.path.abspath(os.path.join(current_dir, '..'))
dotenv_path = os.path.join(project_root, '.env')

if os.path.exists(dotenv_path):
    load_dotenv(dotenv_path, override=False)
    logging.getLogger(__name__).debug(f"Loaded environment overrides from {dotenv_path}")
