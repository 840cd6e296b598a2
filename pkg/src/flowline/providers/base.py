"""Provider interface and the resource type schemas both backends implement.

Resource types:

* ``local_instance`` — a sandbox directory with a static HTTP server
  serving its ``www/`` subtree, plus a generated admin password.
* ``local_site`` — a document directory under an instance's ``www/``,
  served at ``/<doc_root>/``.
* ``local_file`` — a plain file with managed content.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class ProvisionFailed(Exception):
    def __init__(self, command: str, exit_code: int, output: str):
        super().__init__(f"provision command failed (exit {exit_code}): {command}")
        self.command = command
        self.exit_code = exit_code
        self.output = output


class PortUnavailable(Exception):
    pass


class NotFound(Exception):
    def __init__(self, resource_id: str):
        super().__init__(f"no such resource: {resource_id}")
        self.resource_id = resource_id


@dataclass(frozen=True)
class AttrSpec:
    name: str
    kind: str  # text | number | bool | list
    required: bool = False
    computed: bool = False
    force_new: bool = False
    default: object = None

    def __post_init__(self):
        if self.computed and self.required:
            raise ValueError(f"computed attribute {self.name} cannot be required")
        if self.computed and self.force_new:
            raise ValueError(f"force_new applies only to input attributes: {self.name}")


@dataclass(frozen=True)
class ResourceTypeSchema:
    name: str
    attrs: tuple

    def attr(self, name: str):
        for spec in self.attrs:
            if spec.name == name:
                return spec
        return None

    def inputs(self):
        return tuple(a for a in self.attrs if not a.computed)

    def computed(self):
        return tuple(a for a in self.attrs if a.computed)


@dataclass(frozen=True)
class ProviderSchema:
    provider: str
    resource_types: dict = field(default_factory=dict)


def _instance_schema():
    return ResourceTypeSchema(
        "local_instance",
        (
            AttrSpec("name", "text", required=True, force_new=True),
            AttrSpec("port", "number", default=0),
            AttrSpec("provision", "list", default=()),
            AttrSpec("id", "text", computed=True),
            AttrSpec("addr", "text", computed=True),
            AttrSpec("url", "text", computed=True),
            AttrSpec("admin_password", "text", computed=True),
            AttrSpec("root_dir", "text", computed=True),
        ),
    )


def _site_schema():
    return ResourceTypeSchema(
        "local_site",
        (
            AttrSpec("instance", "text", required=True, force_new=True),
            AttrSpec("doc_root", "text", required=True, force_new=True),
            AttrSpec("id", "text", computed=True),
            AttrSpec("path", "text", computed=True),
        ),
    )


def _file_schema():
    return ResourceTypeSchema(
        "local_file",
        (
            AttrSpec("path", "text", required=True, force_new=True),
            AttrSpec("content", "text", required=True),
            AttrSpec("id", "text", computed=True),
            AttrSpec("sha256", "text", computed=True),
        ),
    )


RESOURCE_TYPES = {
    schema.name: schema
    for schema in (_instance_schema(), _site_schema(), _file_schema())
}

PASSWORD_ALPHABET = (
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789"
)
PASSWORD_LENGTH = 24


class Provider:
    """One backend capable of creating/updating/deleting the resource types."""

    name = "abstract"

    def schema(self) -> ProviderSchema:
        return ProviderSchema(self.name, dict(RESOURCE_TYPES))

    def create(self, type_name: str, attrs: dict):
        """Materialize a resource; returns (id, computed_attrs)."""
        raise NotImplementedError

    def update(self, type_name: str, resource_id: str, old_attrs: dict, new_attrs: dict):
        """Mutate a resource in place; returns refreshed computed_attrs."""
        raise NotImplementedError

    def delete(self, type_name: str, resource_id: str) -> None:
        """Tear a resource down. Deleting a missing id is a logged no-op."""
        raise NotImplementedError
