"""Toolkit for a multiparty-session-typed actor calculus."""

__version__ = "0.1.0"
