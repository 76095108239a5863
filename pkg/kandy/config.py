import os
from dotenv import load_dotenv

load_dotenv()

class Settings:
    THREADS = max(1, int(os.getenv("KANDY_THREADS", 1)))
    OUTPUT_DIR = os.getenv("KANDY_OUTPUT_DIR", "runs")
    LOG_LEVEL = os.getenv("KANDY_LOG_LEVEL", "INFO").upper()
    LOG_CONSOLE = os.getenv("KANDY_LOG_CONSOLE", "1") not in ("0", "false", "no")

settings = Settings()
