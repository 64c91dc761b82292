from datetime import datetime, timezone
from typing import List, Optional

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import Response

from . import db
from . import models
from .experiments import VARIANT_ORDER

app = FastAPI(title="Meta-GIN results ledger")

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_methods=["GET"],
    allow_headers=["*"],
)

EXPORT_COLUMNS = ['fingerprint', 'name', 'dataset', 'variant', 'noise_kind', 'epsilon', 'mean_acc', 'std_acc',
                  'rep_count', 'recorded_at']


@app.on_event('startup')
async def startup_event():
    db.init_db()


@app.get('/health')
def health():
    return {'status': 'ok', 'ledger': db.DB_PATH}


def _check_query(limit: int, variant: Optional[str]):
    if limit < 1 or limit > 10000:
        raise HTTPException(status_code=400, detail='limit must be in [1, 10000]')
    if variant is not None and variant not in VARIANT_ORDER:
        raise HTTPException(status_code=400, detail=f'unknown variant {variant!r}')


@app.get('/results', response_model=List[models.LedgerRow])
def results(limit: int = 100, variant: Optional[str] = None):
    _check_query(limit, variant)
    return db.get_results(limit=limit, variant=variant)


@app.get('/results/export')
def results_export(limit: int = 1000, variant: Optional[str] = None):
    """Ledger rows as CSV, newest first."""
    _check_query(limit, variant)
    rows = db.get_results(limit=limit, variant=variant)
    lines = [','.join(EXPORT_COLUMNS)]
    for r in rows:
        lines.append(','.join(str(r[c]) for c in EXPORT_COLUMNS))
    csv_text = '\n'.join(lines) + '\n'
    fname = f"results_{datetime.now(timezone.utc).isoformat().replace(':', '-')}.csv"
    return Response(content=csv_text, media_type='text/csv', headers={
        'Content-Disposition': f'attachment; filename="{fname}"'
    })


# declared after /results/export so the literal path wins
@app.get('/results/{fingerprint}', response_model=models.ResultRecord)
def result(fingerprint: str):
    record = db.get_result(fingerprint)
    if record is None:
        raise HTTPException(status_code=404, detail='no result with this fingerprint')
    return record


@app.get('/summary', response_model=models.SummaryResponse)
def summary():
    return models.SummaryResponse(**db.get_summary())
