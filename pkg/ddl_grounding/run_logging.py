"""RunLogHandler class mirroring run logs into the artifacts directory."""

import logging
from contextlib import contextmanager
from urllib.parse import urlparse

LOG_FORMAT = '%(asctime)s %(name)s: %(message)s'


class RunLogHandler(logging.Handler):
    """RunLogHandler class writing log records to a run's ``run.log``."""

    # Map loglevel codes from `logging` module to run log level names:
    _loglevel_map = {
        logging.NOTSET: 'TRACE',
        logging.DEBUG: 'DEBUG',
        logging.INFO: 'INFO',
        logging.WARNING: 'WARN',
        logging.ERROR: 'ERROR',
        logging.CRITICAL: 'ERROR',
    }
    _sorted_levelnos = sorted(_loglevel_map.keys(), reverse=True)

    def __init__(self, writer, level=logging.NOTSET,
                 filter_client_logs=False, endpoint=None):
        """
        Initialize RunLogHandler instance.

        :param writer:             ArtifactWriter of the run
        :param level:              level of logging
        :param filter_client_logs: if True throw away connection pool logs
                                   about the model endpoint
        :param endpoint:           base URL of the model endpoint
        """
        super(RunLogHandler, self).__init__(level)
        self.writer = writer
        self.filter_client_logs = filter_client_logs
        self.endpoint = endpoint
        self.setFormatter(logging.Formatter(LOG_FORMAT))

    def filter(self, record):
        """Filter specific records to keep them out of the run log.

        :param record: A log record to be filtered
        :return:       False if the given record is connection pool chatter
                       about the model endpoint, otherwise True.
        """
        if not self.filter_client_logs or not self.endpoint:
            return True
        if record.name.startswith('urllib3.connectionpool'):
            hostname = urlparse(self.endpoint).hostname
            if hostname and hostname in record.getMessage():
                return False
        return True

    def level_name(self, levelno):
        """Return the run log level name of a numeric level."""
        for level in self._sorted_levelnos:
            if level <= levelno:
                return self._loglevel_map[level]
        return self._loglevel_map[logging.NOTSET]

    def emit(self, record):
        """
        Emit function.

        :param record: a log Record
        """
        try:
            msg = self.format(record)
        except (KeyboardInterrupt, SystemExit):
            raise
        except Exception:
            self.handleError(record)
            return
        self.writer.write_log('{0:<5} {1}'.format(
            self.level_name(record.levelno), msg))


@contextmanager
def run_log_handler(writer, level='INFO', endpoint=None):
    """
    Attach a RunLogHandler to the root logger for the duration of a run.

    :param writer:   ArtifactWriter of the run
    :param level:    level name or number
    :param endpoint: model endpoint whose connection logs are filtered
    """
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
        if not isinstance(level, int):
            level = logging.INFO
    handler = RunLogHandler(writer, level=level,
                            filter_client_logs=endpoint is not None,
                            endpoint=endpoint)
    root = logging.getLogger()
    root.addHandler(handler)
    try:
        yield handler
    finally:
        root.removeHandler(handler)
