# app.py
from src import cli

if __name__ == "__main__":
    # Config path defaults come from .env / LUCID_ATLAS_CONFIG (see src/config.py)
    cli.main()
