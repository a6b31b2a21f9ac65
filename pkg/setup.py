#!/usr/bin/env python3
"""
vivid Setup Script
Installs vivid as a command-line tool
"""
from setuptools import setup, find_packages
import os

# Read README for long description
def read_file(filename):
    with open(os.path.join(os.path.dirname(__file__), filename), encoding='utf-8') as f:
        return f.read()

setup(
    name="vivid",
    version="0.1.0",
    description="Hand and head aware audio-driven animation at desk scale",
    long_description=read_file("README.md"),
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests", "examples"]),
    py_modules=[
        "vivid_cli",
        "vivid_models",
        "config_manager",
        "checkpoint_manager",
        "run_manager",
        "training_service",
        "generation_service",
        "database_manager",
        "database_repositories",
        "diffusion_core",
        "hand_codebook",
        "audio_streams",
        "denoiser",
        "pose_calibration",
        "keypoint_io",
        "synthetic_data",
        "metrics",
        "errors",
        "enums",
        "report_generator"
    ],
    install_requires=[
        "torch>=2.1.0",
        "numpy>=1.24.0",
        "einops>=0.7.0",
        "pillow>=10.0.0",
        "pydantic>=2.0.0",
        "sqlmodel>=0.0.14",
        "typer>=0.9.0",
        "rich>=13.0.0",
        "psutil>=5.9.0",
    ],
    extras_require={
        "dev": [
            "pytest>=7.4.0",
            "pytest-cov>=4.1.0",
            "hypothesis>=6.80.0",
        ],
    },
    entry_points={
        "console_scripts": [
            "vivid=vivid_cli:app",
        ],
    },
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.10",
    include_package_data=True,
)
