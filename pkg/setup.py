import io

from setuptools import setup

with io.open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setup(
    name='seqflow',
    version='0.1.0',
    license='MIT',

    packages=['seqflow'],

    platforms=['any'],

    description='Affine autoregressive flows as temporal pre-processing for sequence density models',
    long_description=long_description,
    long_description_content_type='text/markdown',

    python_requires='>=3.9',
    install_requires=[
        'numpy>=1.25',
        'scipy>=1.9',
    ],
    entry_points={
        'console_scripts': ['seqflow=seqflow.cli:main'],
    },

    classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Science/Research',
        'Operating System :: OS Independent',

        'License :: OSI Approved :: MIT License',

        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
        'Programming Language :: Python :: 3.12',
    ],
)
