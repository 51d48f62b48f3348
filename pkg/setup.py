'''
Setup file that configures the package.
'''
from setuptools import setup

setup(
    name='pylesion',
    url='https://github.com/pylesion/pylesion',
    author='pylesion contributors',
    packages=['pylesion'],
    install_requires=['numpy>=1.20', 'scipy>=1.4', 'pypng>=0.0.20', 'matplotlib>=3.1'],
    scripts=['scripts/pylesion'],
    version='0.3.1',
    license='BSD-2.0',
    description='Skin lesion segmentation with residual U-Nets, trained on a numpy autograd.',
    long_description=open('README.rst').read(),
    classifiers=[
        "Programming Language :: Python :: 3.7",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Development Status :: 4 - Beta",
        "License :: OSI Approved :: BSD License",
        "Operating System :: OS Independent",
        "Topic :: Scientific/Engineering :: Image Recognition",
    ]
)
