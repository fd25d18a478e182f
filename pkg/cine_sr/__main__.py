"""python -m cine_sr."""
from .cli import main

main()
