"""Tool documents, contract checks and the deterministic simulator.

Every API reply is a two-key envelope, {"error", "response"}. Calls that
break a tool's contract get an error envelope rather than an exception.
"""

# %%
import httpx

from toolforge.apihub import Deterministic, RegistryExecutor, ToolRegistry, simulate_call
from toolforge.model import ApiCall, validate_tool_spec
from toolforge.server import serve_registry

cars = validate_tool_spec(
    {
        "name": "cars_for_car_data",
        "description": "List cars filtered by make and year.",
        "parameters": {
            "type": "object",
            "properties": {
                "page": {"type": "integer", "description": "Page number, from 0."},
                "limit": {"type": "integer", "description": "Rows per page."},
                "make": {"type": "string", "description": "Manufacturer."},
            },
            "required": ["page", "limit"],
        },
    }
)

# %% The same call under the same seed always yields the same bytes.
call = ApiCall("cars_for_car_data", {"page": 0, "limit": 2, "make": "Tesla"})
print(simulate_call(cars, call, Deterministic(7)).to_json())
print(simulate_call(cars, call, Deterministic(7)).to_json())

# %% Contract violations come back as envelopes.
print(simulate_call(cars, ApiCall("cars_for_car_data", {"page": 0}), Deterministic(7)).to_json())
print(simulate_call(cars, ApiCall("cars_for_car_data", {"page": 0, "limit": 2, "colour": "red"}), Deterministic(7)).to_json())

# %% The registry can also be served over HTTP.
registry = ToolRegistry([cars])
with serve_registry(registry, executor=RegistryExecutor(registry, Deterministic(7), mode="sim")) as srv:
    reply = httpx.post(f"{srv.url}/api/cars_for_car_data", json=call.kwargs)
    print(reply.status_code, reply.text)
