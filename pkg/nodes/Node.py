"""
fedcmd-sim federated learning simulator

(C) 2024

node base
"""

import copy

from engine.Errors import ProtocolError
from engine.FedLogger import LOGGER


class Node:
    """
    Base for the controller and the client nodes.

    Class Variables:
    id: node type
    drivers: list of status values, e.g. {"driver": "ST", "value": 0, "name": "Status"}
    commands: command name -> method, looked up by runCmd()

    Class Methods:
    setDriver('ST', 1): sets driver 'ST' to 1
    getDriver('ST'): current value of 'ST'
    runCmd('QUERY'): calls the method registered for 'QUERY'
    """
    id = 'node'
    drivers = []
    commands = {}

    def __init__(self, primary, address, name):
        self.primary = primary
        self.address = address
        self.name = name
        self.drivers = copy.deepcopy(type(self).drivers)

    def setDriver(self, driver, value):
        for d in self.drivers:
            if d['driver'] == driver:
                if d['value'] != value:
                    LOGGER.debug('{} {} = {}'.format(self.address, driver, value))
                d['value'] = value
                return
        raise ProtocolError('Node {} has no driver {}'.format(self.address, driver))

    def getDriver(self, driver):
        for d in self.drivers:
            if d['driver'] == driver:
                return d['value']
        raise ProtocolError('Node {} has no driver {}'.format(self.address, driver))

    def runCmd(self, command, *args, **kwargs):
        try:
            method = self.commands[command]
        except KeyError:
            raise ProtocolError('Node {} does not accept {}; commands are {}'.format(
                self.address, command, sorted(self.commands)))
        return method(self, *args, **kwargs)

    def query(self, command=None):
        return {d['driver']: d['value'] for d in self.drivers}
