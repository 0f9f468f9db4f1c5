"""Shared error taxonomy.

DataError covers everything caused by bad inputs on disk (malformed or
truncated files, schema violations, unknown references). The CLI maps it
to exit code 2, usage problems to 1, and anything else to 3.
"""


class DataError(Exception):
    pass
