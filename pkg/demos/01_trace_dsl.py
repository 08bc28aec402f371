"""Reading and writing agent traces.

A trace is a run of <thought>/<execute> turns, each followed by the JSON
envelopes the tools returned, closed by a final answer or a give-up.
"""

# %%
from toolforge.dsl import DslError, parse_call_expr, parse_trace, render_call, render_trace

text = """<thought>I should list the airplanes first.</thought>
<execute>print(all_airplanes_for_airplanesdb())</execute>
Observation:
```json
{"error": "", "response": [{"id": 1, "plane": "Boeing 737-800"}]}
```
<thought>Now fetch the details of id 1.</thought>
<execute>print(single_airplane_for_airplanesdb(is_id=1))</execute>
Observation:
```json
{"error": "", "response": {"id": 1, "plane": "Boeing 737-800", "seats": 189}}
```
<thought>That answers it.</thought>
<final_answer>The Boeing 737-800 seats 189.</final_answer>"""

trace = parse_trace(text)
print(len(trace.steps), "steps,", trace.call_count, "calls, terminal:", trace.terminal.kind.value)

# %% Rendering is the inverse of parsing.
assert parse_trace(render_trace(trace)) == trace

# %% Calls take keyword arguments and literal values only.
call = parse_call_expr('print(ticket_info_query(destination="Beijing", travel_mode="Train"))')[0]
print(call.tool_name, call.kwargs, "->", render_call(call))

for bad in ["f(1)", "f(x=g())", "f(x=1+2)", "os.system('ls')"]:
    try:
        parse_call_expr(bad)
    except DslError as exc:
        print(f"{bad!r:22} rejected: {exc}")
