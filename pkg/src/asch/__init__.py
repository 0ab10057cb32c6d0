"""Syscall interception for AArch64 by static SVC rewriting."""

__version__ = "0.1.0"
