#!/usr/bin/env python3
# coding=utf-8

import logging

from lib.cli import cli

logger = logging.getLogger(__name__)


def main():
    try:
        cli(prog_name='alas', auto_envvar_prefix='ALAS')  # pylint: disable=unexpected-keyword-arg,no-value-for-parameter
    except KeyboardInterrupt:
        print()


if __name__ == '__main__':
    main()
