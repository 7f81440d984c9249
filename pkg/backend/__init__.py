"""
Backend package initialization
"""
