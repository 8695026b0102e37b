"""Simulator domains; each package pairs ``helpers.py`` logic with a ``cli.py`` stage handler."""
