#!/usr/bin/env python3
"""
Setup script for the MLTN toolkit
"""

from setuptools import setup

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

with open("requirements.txt", "r", encoding="utf-8") as fh:
    requirements = [line.strip() for line in fh if line.strip() and not line.startswith("#")]

setup(
    name="mltn-toolkit",
    version="0.1.0",
    description="Multi-layered tensor network image classifiers with measured and analytic cost",
    long_description=long_description,
    long_description_content_type="text/markdown",
    py_modules=[
        "errors",
        "tensor_core",
        "tn_model",
        "optim",
        "data_metrics",
        "complexity",
        "train_config",
        "checkpoint",
        "trainer",
        "mltn_cli",
    ],
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
    ],
    python_requires=">=3.9",
    install_requires=requirements,
    entry_points={
        "console_scripts": [
            "mltn=mltn_cli:main",
        ],
    },
    keywords="tensor network, matrix product state, image classification, medical imaging",
)
