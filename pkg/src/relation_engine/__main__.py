"""Allow running as: python -m relation_engine"""
from relation_engine.cli import main
main()
