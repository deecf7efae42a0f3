"""
Schrödinger Lab - 随机薛定谔方程反散射数值实验室
"""

__version__ = "0.3.1"
