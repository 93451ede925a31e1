"""
fedcmd-sim federated learning simulator

(C) 2024

shared logger

Every module does `from engine.FedLogger import LOGGER` and logs through the
same named logger. Handlers are only installed by setup_logging(), so library
use and the tests stay quiet unless asked.
"""

import logging
import logging.handlers
import os

LOGGER = logging.getLogger('fedcmd')

LOG_FORMAT = '%(asctime)s %(threadName)-12s %(name)-8s %(levelname)-8s %(module)s:%(funcName)s: %(message)s'


def setup_logging(level='INFO', logdir=None):
    """
    Install a console handler and, when logdir is given, a daily rotating
    file handler at <logdir>/debug.log. Safe to call more than once.
    """
    LOGGER.setLevel(level if isinstance(level, int) else str(level).upper())
    for handler in list(LOGGER.handlers):
        LOGGER.removeHandler(handler)
        handler.close()
    formatter = logging.Formatter(LOG_FORMAT)

    console = logging.StreamHandler()
    console.setFormatter(formatter)
    LOGGER.addHandler(console)

    if logdir:
        os.makedirs(logdir, exist_ok=True)
        logfile = logging.handlers.TimedRotatingFileHandler(
            os.path.join(logdir, 'debug.log'), when='midnight', backupCount=30)
        logfile.setFormatter(formatter)
        LOGGER.addHandler(logfile)
    LOGGER.propagate = False
    LOGGER.info('New log level: {}'.format(logging.getLevelName(LOGGER.level)))
    return LOGGER
