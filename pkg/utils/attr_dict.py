"""
Attribute dictionary used for the global config tree
"""


class AttrDict(dict):
    """
    dict with attribute access, recursive immutability and dotted-key helpers
    """

    IMMUTABLE = '__immutable__'

    def __init__(self, *args, **kwargs):
        super(AttrDict, self).__init__(*args, **kwargs)
        self.__dict__[AttrDict.IMMUTABLE] = False

    def __getattr__(self, name):
        if name in self.__dict__:
            return self.__dict__[name]
        elif name in self:
            return self[name]
        else:
            raise AttributeError(name)

    def __setattr__(self, name, value):
        if self.__dict__[AttrDict.IMMUTABLE]:
            raise AttributeError(
                'Attempted to set "{}" to "{}", but AttrDict is immutable'.format(name, value))
        if name in self.__dict__:
            self.__dict__[name] = value
        else:
            self[name] = value

    def immutable(self, is_immutable):
        """
        Set immutability to is_immutable and recursively apply the setting
        to all nested AttrDicts.
        """
        self.__dict__[AttrDict.IMMUTABLE] = is_immutable
        for v in self.values():
            if isinstance(v, AttrDict):
                v.immutable(is_immutable)

    def is_immutable(self):
        return self.__dict__[AttrDict.IMMUTABLE]

    def flatten(self, prefix=''):
        """
        Yield (dotted_key, value) for every leaf, sections in insertion order
        """
        for k, v in self.items():
            key = '{}.{}'.format(prefix, k) if prefix else k
            if isinstance(v, AttrDict):
                for item in v.flatten(key):
                    yield item
            else:
                yield key, v

    def get_dotted(self, key):
        node = self
        for part in key.split('.'):
            if not isinstance(node, AttrDict) or part not in node:
                raise KeyError(key)
            node = node[part]
        return node

    def set_dotted(self, key, value):
        parts = key.split('.')
        node = self
        for part in parts[:-1]:
            if not isinstance(node.get(part), AttrDict):
                raise KeyError(key)
            node = node[part]
        if parts[-1] not in node:
            raise KeyError(key)
        setattr(node, parts[-1], value)

    def clone(self):
        """
        Deep, mutable copy of the tree
        """
        out = AttrDict()
        for k, v in self.items():
            out[k] = v.clone() if isinstance(v, AttrDict) else (list(v) if isinstance(v, list) else v)
        return out
