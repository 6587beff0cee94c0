#!/usr/bin/env python
# -*- coding: utf-8 -*-

from setuptools import setup, find_packages


def long_description():
    with open("README.md", "r") as readme:
        return readme.read()


def packages():
    return find_packages(include=["dualoss_def*", "scripts*"])


def install_requires():
    with open("requirements.txt", "r") as requirements:
        return requirements.readlines()


setup(
    name="dualoss_def",
    version="0.1.0",
    description="Adversarially trained U-Net defense for siamese visual trackers",
    long_description=long_description(),
    license="Unlicense",
    classifiers=[
        "Development Status :: 3 - Alpha",
    ],
    keywords="visual tracking, adversarial defense, siamese network",
    packages=packages(),
    install_requires=install_requires(),
    python_requires=">=3.8",
    test_suite="tests",
    entry_points={
        "console_scripts": [
            "dualoss_train_tracker=scripts.train_tracker:main",
            "dualoss_train_defense=scripts.train_defense:main",
            "dualoss_eval=scripts.evaluate:main",
            "dualoss_report=scripts.report:main",
            "dualoss_acceptance=scripts.acceptance:main",
        ],
    },
)
