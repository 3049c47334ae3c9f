"""A client creates an instance on a neighbour; ownership of the new ACLs stays with a server.

Run with ``python3 demos/create_ownership.py``.
"""

from lwm2m_c2c.ownership import replay_create_ownership

replay = replay_create_ownership()
print(f"c3 POST /3311 -> {replay.response.code.dotted}, location /{'/'.join(replay.response.location_path)}\n")

dump = replay.node("c1").dump()
for table in ("access_control", "client_access_control"):
    print(table)
    for row in dump[table]:
        target = f"/{row['object']}" + ("" if row["instance_ref"] is None else f"/{row['instance_ref']}")
        rights = ", ".join(f"{who}: {'|'.join(flags)}" for who, flags in row["acl"].items())
        print(f"  instance {row['instance']}  target {target:<8} owner {row['owner']:<6} {rights}")
    print()

print("The creator (client 3) gets read|write on its new instance but owns nothing;")
print("server 1, owner of the authorizing entry, owns both new ACL instances.")
