""" Node classes used by the fedcmd-sim controller. """

from .Node            import Node
from .Broker          import Broker
from .FLClient        import FLClient
from .Controller      import Controller
