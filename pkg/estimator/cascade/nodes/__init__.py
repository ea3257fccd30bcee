"""
LangGraph nodes of the detection cascade.
"""
from .propose import propose
from .refine import refine
from .output import output

__all__ = [
    'propose',
    'refine',
    'output'
]
