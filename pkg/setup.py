from setuptools import find_packages, setup

setup(
    name="collabdet",
    version="0.1.0",
    description="Collaborative weakly and strongly supervised detectors on synthetic shapes",
    packages=find_packages(exclude=["tests"]),
    py_modules=["main"],
    install_requires=["numpy", "pygame", "matplotlib"],
    python_requires=">=3.10",
)
