"""
Main entry point for the birdsong classification pipeline
"""

from src.app import run_app

if __name__ == '__main__':
    run_app()
